#include "pnmf/matrix.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "pnmf/error.hpp"

namespace pnmf {

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    fail(ErrorCode::ShapeError, "data length " + std::to_string(data_.size()) + " != " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
  }
}

DenseMatrix DenseMatrix::from_doubles(std::size_t rows, std::size_t cols,
                                      std::span<const double> data) {
  if (data.size() != rows * cols) {
    fail(ErrorCode::ShapeError, "from_doubles: length mismatch");
  }
  std::vector<float> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<float>(data[i]);
  return DenseMatrix(rows, cols, std::move(out));
}

std::vector<double> DenseMatrix::column(std::size_t c) const {
  std::vector<double> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

void DenseMatrix::set_column(std::size_t c, std::span<const double> values) {
  if (values.size() != rows_) fail(ErrorCode::ShapeError, "set_column: length mismatch");
  for (std::size_t r = 0; r < rows_; ++r) (*this)(r, c) = static_cast<float>(values[r]);
}

std::vector<double> DenseMatrix::row_as_double(std::size_t r) const {
  auto src = row(r);
  return {src.begin(), src.end()};
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool DenseMatrix::all_finite() const noexcept {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool operator==(const DenseMatrix& a, const DenseMatrix& b) noexcept {
  if (a.rows_ != b.rows_ || a.cols_ != b.cols_) return false;
  return a.data_.empty() ||
         std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
}

}  // namespace pnmf
