#pragma once

// Dense linear-algebra toolkit: Kronecker products and sums, column-stacking
// vectorization, symmetric eigendecomposition, PSD pseudoinverse, null-space
// projectors and a matrix-free power iteration for d^2-dimensional operators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "sgdstab/error.hpp"
#include "sgdstab/random.hpp"

namespace sgdstab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative cutoff below which an eigenvalue counts as zero.
inline constexpr double kDefaultRankTol = 1e-10;

/// Largest dimension d for which d^2 x d^2 operators are formed densely.
inline constexpr Index kDenseCap = 48;

/// Dense symmetric matrix. Construction symmetrizes the input as (M + M^T)/2,
/// so entries are exactly mirrored.
class SymMatrix {
 public:
  SymMatrix() = default;

  explicit SymMatrix(const Matrix& m) {
    if (m.rows() != m.cols() || m.rows() < 1)
      throw InvalidArgument("SymMatrix: expected a non-empty square matrix, got " +
                            std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    m_ = 0.5 * (m + m.transpose());
  }

  static SymMatrix identity(Index d) { return SymMatrix(Matrix::Identity(d, d)); }
  static SymMatrix zero(Index d) { return SymMatrix(Matrix::Zero(d, d)); }

  Index dim() const noexcept { return m_.rows(); }
  const Matrix& matrix() const noexcept { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }

  friend bool operator==(const SymMatrix& a, const SymMatrix& b) {
    return a.m_.rows() == b.m_.rows() && a.m_ == b.m_;
  }

 private:
  Matrix m_;
};

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted in
/// descending order; `vectors` holds the matching orthonormal eigenvectors as
/// columns. `rank_tol` is the absolute cutoff (rel_tol * max|lambda|) used by
/// rank-dependent consumers.
struct EigDecomp {
  Vector values;
  Matrix vectors;
  double rank_tol = 0.0;

  double lambda_max() const { return values(0); }
  double lambda_min() const { return values(values.size() - 1); }
  Index dim() const { return values.size(); }
};

/// Matrix-free linear map R^in_dim -> R^out_dim.
struct LinearOperator {
  Index in_dim = 0;
  Index out_dim = 0;
  std::function<Vector(const Vector&)> apply;

  Vector operator()(const Vector& x) const { return apply(x); }

  static LinearOperator from_matrix(Matrix m) {
    const Index rows = m.rows(), cols = m.cols();
    return {cols, rows, [m = std::move(m)](const Vector& x) -> Vector { return m * x; }};
  }
};

// ---------------------------------------------------------------------------
// Kronecker algebra and vectorization
// ---------------------------------------------------------------------------

inline Matrix kron(const Matrix& a, const Matrix& b) {
  const Index rb = b.rows(), cb = b.cols();
  Matrix out(a.rows() * rb, a.cols() * cb);
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i) out.block(i * rb, j * cb, rb, cb) = a(i, j) * b;
  return out;
}

/// a (+) b = a (x) I + I (x) b.
inline Matrix kron_sum(const Matrix& a, const Matrix& b) {
  if (a.rows() != a.cols() || b.rows() != b.cols())
    throw InvalidArgument("kron_sum: operands must be square");
  return kron(a, Matrix::Identity(b.rows(), b.rows())) +
         kron(Matrix::Identity(a.rows(), a.rows()), b);
}

/// Column-stacking vectorization.
inline Vector vec(const Matrix& m) {
  return Eigen::Map<const Vector>(m.data(), m.size());
}

inline Matrix unvec(const Vector& v, Index d) {
  if (d < 1 || v.size() != d * d)
    throw InvalidArgument("unvec: vector of length " + std::to_string(v.size()) +
                          " cannot be reshaped to " + std::to_string(d) + "x" +
                          std::to_string(d));
  return Eigen::Map<const Matrix>(v.data(), d, d);
}

// ---------------------------------------------------------------------------
// Spectral routines
// ---------------------------------------------------------------------------

inline EigDecomp sym_eig(const SymMatrix& m, double rel_tol = kDefaultRankTol) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m.matrix(), Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success)
    throw NumericalFailure("sym_eig: symmetric QR iteration did not converge");
  EigDecomp out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  out.rank_tol = rel_tol * out.values.cwiseAbs().maxCoeff();
  return out;
}

/// Moore-Penrose pseudoinverse of a PSD matrix. Eigenvalues at or below
/// rel_tol * lambda_max are treated as zero.
inline SymMatrix pinv_psd(const SymMatrix& m, double rel_tol = kDefaultRankTol) {
  const EigDecomp eig = sym_eig(m, rel_tol);
  const double top = std::max(eig.lambda_max(), 0.0);
  if (eig.lambda_min() < -rel_tol * eig.lambda_max())
    throw InvalidArgument("pinv_psd: matrix is not PSD (lambda_min = " +
                          std::to_string(eig.lambda_min()) + ")");
  Matrix out = Matrix::Zero(m.dim(), m.dim());
  const double cut = rel_tol * top;
  for (Index k = 0; k < eig.dim(); ++k) {
    if (eig.values(k) <= cut) break;
    out.noalias() += (1.0 / eig.values(k)) * eig.vectors.col(k) * eig.vectors.col(k).transpose();
  }
  return SymMatrix(out);
}

/// Symmetric square root of the pseudoinverse, (M^1/2)^+, for PSD M.
inline SymMatrix pinv_sqrt_psd(const SymMatrix& m, double rel_tol = kDefaultRankTol) {
  const EigDecomp eig = sym_eig(m, rel_tol);
  const double top = std::max(eig.lambda_max(), 0.0);
  if (eig.lambda_min() < -rel_tol * eig.lambda_max())
    throw InvalidArgument("pinv_sqrt_psd: matrix is not PSD");
  Matrix out = Matrix::Zero(m.dim(), m.dim());
  const double cut = rel_tol * top;
  for (Index k = 0; k < eig.dim(); ++k) {
    if (eig.values(k) <= cut) break;
    out.noalias() +=
        (1.0 / std::sqrt(eig.values(k))) * eig.vectors.col(k) * eig.vectors.col(k).transpose();
  }
  return SymMatrix(out);
}

struct NullProjectors {
  SymMatrix par;   // onto the null space
  SymMatrix perp;  // onto its orthogonal complement
};

inline NullProjectors null_projectors(const SymMatrix& m, double rel_tol = kDefaultRankTol) {
  const EigDecomp eig = sym_eig(m, rel_tol);
  const double cut = rel_tol * std::max(eig.lambda_max(), 0.0);
  const Index d = m.dim();
  Matrix par = Matrix::Zero(d, d);
  for (Index k = 0; k < d; ++k)
    if (eig.values(k) <= cut) par.noalias() += eig.vectors.col(k) * eig.vectors.col(k).transpose();
  return {SymMatrix(par), SymMatrix(Matrix::Identity(d, d) - par)};
}

inline double lambda_max(const SymMatrix& m) { return sym_eig(m).lambda_max(); }

// ---------------------------------------------------------------------------
// Matrix-free power iteration
// ---------------------------------------------------------------------------

namespace detail {

/// Plain power iteration on `op + shift*I`; returns the converged Rayleigh
/// quotient of the shifted operator.
inline double power_rayleigh(const LinearOperator& op, double shift, double tol, int max_iter,
                             Rng& rng) {
  Vector x = random_unit_vector(op.in_dim, rng);
  double prev = 0.0;
  for (int k = 0; k < max_iter; ++k) {
    Vector y = op(x) + shift * x;
    const double rq = x.dot(y);
    const double ny = y.norm();
    if (ny == 0.0) return 0.0;
    if (k > 0 && std::abs(rq - prev) < tol * std::max(1.0, std::abs(rq))) return rq;
    prev = rq;
    x = y / ny;
  }
  throw NumericalFailure("power_lambda_max: no convergence after " + std::to_string(max_iter) +
                         " iterations");
}

}  // namespace detail

/// Largest eigenvalue of a self-adjoint operator.
///
/// A first pass finds the eigenvalue of largest magnitude. If it is negative,
/// the top of the spectrum is not dominant and a second pass runs on op + sigma*I
/// with sigma = |lambda_min| so that all shifted eigenvalues are nonnegative
/// and the dominant one is lambda_max + sigma.
inline double power_lambda_max(const LinearOperator& op, double tol = 1e-13,
                               int max_iter = 200000, std::uint64_t seed = 0) {
  if (op.in_dim != op.out_dim || op.in_dim < 1)
    throw InvalidArgument("power_lambda_max: operator must be square");
  Rng rng(stream_seed(seed, 0x5eed));

  // Self-adjointness probe.
  for (int probe = 0; probe < 2; ++probe) {
    const Vector x = random_unit_vector(op.in_dim, rng);
    const Vector y = random_unit_vector(op.in_dim, rng);
    const Vector ox = op(x), oy = op(y);
    const double scale = std::max({1.0, ox.norm(), oy.norm()});
    if (std::abs(ox.dot(y) - x.dot(oy)) > 1e-8 * scale)
      throw InvalidArgument("power_lambda_max: operator is not self-adjoint");
  }

  const double dominant = detail::power_rayleigh(op, 0.0, tol, max_iter, rng);
  if (dominant >= 0.0) return dominant;
  const double sigma = -dominant;
  return detail::power_rayleigh(op, sigma, tol, max_iter, rng) - sigma;
}

}  // namespace sgdstab
