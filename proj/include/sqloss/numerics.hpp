#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace sqloss {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Sphere-membership tolerance: well above fp64 roundoff, well below meaningful drift.
inline constexpr double kTauNorm = 1e-8;

/// Default central-difference step; balances truncation against roundoff at fp64.
inline constexpr double kFiniteDiffStep = 1e-5;

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& m) {
  return m.norm();
}

/// Frobenius inner product <a, b> = sum_ij a_ij b_ij.
template <typename DerivedA, typename DerivedB>
double frobenius_dot(const Eigen::MatrixBase<DerivedA>& a,
                     const Eigen::MatrixBase<DerivedB>& b) {
  return a.cwiseProduct(b).sum();
}

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

inline Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.size()) {
    throw std::invalid_argument("matvec: dimension mismatch, matrix is " +
                                shape_string(m.rows(), m.cols()) + ", vector has length " +
                                std::to_string(v.size()));
  }
  return m * v;
}

/// Component of `direction` orthogonal (Frobenius) to the unit-norm matrix `v`;
/// the flattened analogue of S = I - V V^T applied to the flattened matrices.
inline Matrix tangent_project(const Matrix& direction, const Matrix& v) {
  const double vn = v.norm();
  if (std::abs(vn - 1.0) > kTauNorm) {
    throw std::invalid_argument("tangent_project: V is not unit-norm, ||V||_F = " +
                                std::to_string(vn));
  }
  return direction - frobenius_dot(v, direction) * v;
}

/// Entrywise central-difference gradient of a scalar function of a matrix.
template <typename Func>
Matrix finite_diff_grad(Func&& func, const Matrix& at, double h = kFiniteDiffStep) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("finite_diff_grad: step h must be positive");
  }
  Matrix x = at;
  Matrix grad(at.rows(), at.cols());
  for (Eigen::Index j = 0; j < at.cols(); ++j) {
    for (Eigen::Index i = 0; i < at.rows(); ++i) {
      x(i, j) = at(i, j) + h;
      const double fp = func(x);
      x(i, j) = at(i, j) - h;
      const double fm = func(x);
      x(i, j) = at(i, j);
      grad(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return grad;
}

/// i.i.d. standard-normal matrix from a caller-owned generator.
inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

}  // namespace sqloss
