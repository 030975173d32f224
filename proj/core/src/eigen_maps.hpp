#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace freqattack::detail {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using MatMap = Eigen::Map<RowMatrix<Real>>;

template <typename Real>
using ConstMatMap = Eigen::Map<const RowMatrix<Real>>;

template <typename Real>
MatMap<Real> as_matrix(Real* data, std::size_t rows, std::size_t cols) {
  return MatMap<Real>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Real>
ConstMatMap<Real> as_matrix(const Real* data, std::size_t rows, std::size_t cols) {
  return ConstMatMap<Real>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace freqattack::detail
