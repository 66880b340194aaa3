#pragma once

#include <Eigen/Dense>
#include <Eigen/Jacobi>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ssmcl/errors.hpp"

namespace ssmcl {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

/// Dense rank-3 array, index (i, j, k) with k fastest.
template <typename Scalar>
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(Index d0, Index d1, Index d2, Scalar fill = Scalar(0))
      : d0_(d0), d1_(d1), d2_(d2), data_(static_cast<std::size_t>(d0 * d1 * d2), fill) {}

  Index dim0() const { return d0_; }
  Index dim1() const { return d1_; }
  Index dim2() const { return d2_; }
  std::size_t size() const { return data_.size(); }

  Scalar& operator()(Index i, Index j, Index k) { return data_[offset(i, j, k)]; }
  const Scalar& operator()(Index i, Index j, Index k) const { return data_[offset(i, j, k)]; }

  // Slice i viewed as a dim1 x dim2 row-major matrix.
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> slice(Index i) {
    return {data_.data() + offset(i, 0, 0), d1_, d2_};
  }
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> slice(
      Index i) const {
    return {data_.data() + offset(i, 0, 0), d1_, d2_};
  }

  std::vector<Scalar>& data() { return data_; }
  const std::vector<Scalar>& data() const { return data_; }

 private:
  std::size_t offset(Index i, Index j, Index k) const {
    return static_cast<std::size_t>((i * d1_ + j) * d2_ + k);
  }

  Index d0_ = 0, d1_ = 0, d2_ = 0;
  std::vector<Scalar> data_;
};

using Tensor = Tensor3<double>;

template <typename A, typename B>
void require_product_shapes(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a) + " by " + shape_str(b));
  }
}

/// Checked matrix product. Throws ShapeError when a.cols() != b.rows().
template <typename A, typename B>
MatrixX<typename A::Scalar> matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  require_product_shapes(a, b);
  return a * b;
}

template <typename Derived>
typename Derived::Scalar frobenius_norm(const Eigen::MatrixBase<Derived>& a) {
  return a.norm();
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& a) {
  return a.allFinite();
}

/// Uncentered covariance J^T J of stacked feature rows, exactly symmetric.
template <typename Derived>
MatrixX<typename Derived::Scalar> gram(const Eigen::MatrixBase<Derived>& rows) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> q = MatrixX<Scalar>::Zero(rows.cols(), rows.cols());
  if (rows.rows() == 0) return q;
  q.template selfadjointView<Eigen::Lower>().rankUpdate(rows.transpose());
  q.template triangularView<Eigen::StrictlyUpper>() = q.transpose();
  return q;
}

template <typename Scalar>
struct SymEigen {
  VectorX<Scalar> values;   // descending
  MatrixX<Scalar> vectors;  // column i pairs with values(i)
  int sweeps = 0;
};

struct JacobiOptions {
  double tolerance = 1e-12;  // off-diagonal Frobenius norm relative to ||S||_F
  int max_sweeps = 100;
  double symmetry_tolerance = 1e-10;
};

namespace detail {

template <typename Scalar>
Scalar off_diagonal_norm(const MatrixX<Scalar>& a) {
  Scalar sum = 0;
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i)
      if (i != j) sum += a(i, j) * a(i, j);
  return std::sqrt(sum);
}

}  // namespace detail

/// Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back sorted descending, eigenvector columns aligned with
/// them. Each eigenvector is signed so that its largest-magnitude entry is
/// nonnegative, which makes the output deterministic.
template <typename Derived>
SymEigen<typename Derived::Scalar> sym_eigh(const Eigen::MatrixBase<Derived>& s,
                                            const JacobiOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  const Index n = s.rows();
  if (s.rows() != s.cols()) {
    throw ShapeError("sym_eigh: matrix must be square, got " + shape_str(s));
  }
  if (!s.allFinite()) throw DomainError("sym_eigh: non-finite entry");
  const Scalar norm = s.norm();
  if ((s - s.transpose()).norm() > Scalar(opts.symmetry_tolerance) * norm) {
    throw ShapeError("sym_eigh: matrix is not symmetric");
  }

  MatrixX<Scalar> a = (s + s.transpose()) / Scalar(2);
  MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);
  const Scalar threshold = Scalar(opts.tolerance) * norm;

  int sweep = 0;
  while (detail::off_diagonal_norm(a) > threshold) {
    if (sweep == opts.max_sweeps) {
      throw ConvergenceError("sym_eigh: no convergence after " + std::to_string(sweep) +
                             " sweeps");
    }
    for (Index p = 0; p + 1 < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        if (a(p, q) == Scalar(0)) continue;
        Eigen::JacobiRotation<Scalar> rot;
        rot.makeJacobi(a, p, q);
        a.applyOnTheLeft(p, q, rot.adjoint());
        a.applyOnTheRight(p, q, rot);
        v.applyOnTheRight(p, q, rot);
        a(p, q) = a(q, p) = Scalar(0);
      }
    }
    ++sweep;
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index i, Index j) { return a(i, i) > a(j, j); });

  SymEigen<Scalar> out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  out.sweeps = sweep;
  for (Index k = 0; k < n; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    out.values(k) = a(src, src);
    auto col = out.vectors.col(k);
    col = v.col(src);
    Index arg = 0;
    for (Index i = 1; i < n; ++i)
      if (std::abs(col(i)) > std::abs(col(arg))) arg = i;
    if (n > 0 && col(arg) < Scalar(0)) col = -col;
  }
  return out;
}

}  // namespace ssmcl
