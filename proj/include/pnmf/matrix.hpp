#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace pnmf {

/// Row-major matrix of 32-bit reals. Feature matrices keep one sample per
/// column (V, W, H, X); network batches keep one sample per row.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static DenseMatrix from_doubles(std::size_t rows, std::size_t cols, std::span<const double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double> column(std::size_t c) const;
  void set_column(std::size_t c, std::span<const double> values);
  std::vector<double> row_as_double(std::size_t r) const;

  DenseMatrix transposed() const;
  bool all_finite() const noexcept;

  /// Bitwise comparison (distinguishes -0.0 from 0.0, NaN payloads compare by bits).
  friend bool operator==(const DenseMatrix& a, const DenseMatrix& b) noexcept;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

}  // namespace pnmf
