#pragma once

#include <Eigen/Dense>

#include "pnmf/matrix.hpp"

namespace pnmf::detail {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline MatrixD to_eigen(const DenseMatrix& m) {
  MatrixD out(m.rows(), m.cols());
  const auto src = m.data();
  for (std::size_t i = 0; i < src.size(); ++i) out.data()[i] = src[i];
  return out;
}

inline DenseMatrix from_eigen(const MatrixD& m) {
  return DenseMatrix::from_doubles(static_cast<std::size_t>(m.rows()),
                                   static_cast<std::size_t>(m.cols()),
                                   {m.data(), static_cast<std::size_t>(m.size())});
}

}  // namespace pnmf::detail
