#pragma once

// Numerical certification of the structure of symmetric Kronecker systems
// Q = sum_i w_i Y_i (x) Y_i with symmetric Y_i:
//   1. every eigenspace has a basis of (unvec'd) symmetric or skew-symmetric matrices;
//   2. the spectral radius equals the top eigenvalue;
//   3. the top eigenvalue has an eigenvector that is a PSD matrix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sgdstab/combinatorics.hpp"
#include "sgdstab/error.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/linalg.hpp"

namespace sgdstab {

struct KronFamily {
  Index dim = 0;
  std::vector<SymMatrix> members;
  /// Nonnegative member weights; empty means all ones.
  std::vector<double> weights;

  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }

  Matrix assemble() const {
    Matrix q = Matrix::Zero(dim * dim, dim * dim);
    for (std::size_t i = 0; i < members.size(); ++i)
      q += weight(i) * kron(members[i].matrix(), members[i].matrix());
    return q;
  }
};

struct CertifyReport {
  double rho = 0.0;
  double lambda_max = 0.0;
  SymMatrix top_eigvec_matrix;   // unit Frobenius norm
  double min_eig_of_top = 0.0;
  double top_residual = 0.0;     // |Q z - lambda_max z|
  bool used_abs_spectrum = false;
  std::vector<double> eigvec_symmetry_defects;
};

/// Family of all C(n, B) realizations of the SGD transition matrix
/// I - (eta / B) sum_{i in batch} H_i, each with probability weight 1 / C(n, B).
inline KronFamily transition_family(const ProblemInstance& inst, double eta, int batch,
                                    std::uint64_t cap = 10000) {
  const int n = inst.n();
  p_of_batch(n, batch);
  const std::uint64_t count = binomial(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(batch));
  if (count > cap) throw InvalidArgument("transition_family: C(n, B) exceeds the enumeration cap");
  KronFamily fam;
  fam.dim = inst.d();
  for_each_subset(n, batch, [&](std::span<const int> b) {
    Matrix A = Matrix::Identity(inst.d(), inst.d());
    for (int i : b) A -= (eta / batch) * inst.hessians()[static_cast<std::size_t>(i)].matrix();
    fam.members.emplace_back(A);
    fam.weights.push_back(1.0 / static_cast<double>(count));
  });
  return fam;
}

namespace detail {

/// min(|Z - Z^T|_F, |Z + Z^T|_F) for Z = unvec(z).
inline double symmetry_defect(const Vector& z, Index d) {
  const Matrix Z = unvec(z, d);
  return std::min((Z - Z.transpose()).norm(), (Z + Z.transpose()).norm());
}

/// Rotates an orthonormal eigenspace basis so each column is vec of a
/// symmetric or a skew-symmetric matrix. The compressed symmetrizer
/// B^T P_sym B has eigenvalues in {0, 1} when the eigenspace is invariant
/// under transposition; its eigenvectors give the split.
inline Matrix split_sym_skew(const Matrix& basis, Index d) {
  const Index k = basis.cols();
  Matrix sym_part(basis.rows(), k);
  for (Index j = 0; j < k; ++j) {
    const Matrix Z = unvec(basis.col(j), d);
    sym_part.col(j) = vec(0.5 * (Z + Z.transpose()));
  }
  const Matrix M = basis.transpose() * sym_part;
  const EigDecomp eig = sym_eig(SymMatrix(M));
  Matrix out = basis * eig.vectors;
  for (Index j = 0; j < k; ++j) {
    // Snap each rotated vector to its exact symmetric or skew part.
    const Matrix Z = unvec(out.col(j), d);
    const Matrix part = eig.values(j) >= 0.5 ? Matrix(0.5 * (Z + Z.transpose()))
                                             : Matrix(0.5 * (Z - Z.transpose()));
    const double nrm = part.norm();
    if (nrm > 0.5) out.col(j) = vec(part / nrm);
  }
  return out;
}

}  // namespace detail

inline CertifyReport certify(const KronFamily& fam) {
  const Index d = fam.dim;
  if (d < 1) throw InvalidArgument("certify: empty family dimension");
  if (d > kDenseCap) throw InvalidArgument("certify: dimension exceeds the dense cap");
  for (std::size_t i = 0; i < fam.members.size(); ++i) {
    if (fam.members[i].dim() != d) throw InvalidArgument("certify: member dimension mismatch");
    if (fam.weight(i) < 0.0) throw InvalidArgument("certify: negative weight");
  }

  const Matrix Q = fam.assemble();
  const EigDecomp eig = sym_eig(SymMatrix(Q));
  const Index m = eig.dim();

  CertifyReport rep;
  rep.lambda_max = eig.lambda_max();
  rep.rho = eig.values.cwiseAbs().maxCoeff();

  // Group eigenvalues into eigenspaces and repair each basis.
  Matrix repaired = eig.vectors;
  Index top_end = 1;
  for (Index start = 0; start < m;) {
    Index end = start + 1;
    while (end < m && std::abs(eig.values(end) - eig.values(end - 1)) <=
                          1e-8 * std::max(1.0, std::abs(eig.values(end - 1))))
      ++end;
    if (start == 0) top_end = end;
    repaired.middleCols(start, end - start) =
        detail::split_sym_skew(eig.vectors.middleCols(start, end - start), d);
    start = end;
  }
  rep.eigvec_symmetry_defects.reserve(static_cast<std::size_t>(m));
  for (Index j = 0; j < m; ++j)
    rep.eigvec_symmetry_defects.push_back(detail::symmetry_defect(repaired.col(j), d));

  // Search the top eigenspace for a PSD eigenvector matrix.
  const double lam = rep.lambda_max;
  const double resid_tol = 1e-7 * std::max(1.0, std::abs(lam));
  bool found = false;
  double best_min = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < top_end && !found; ++j) {
    Matrix Z = unvec(repaired.col(j), d);
    if ((Z - Z.transpose()).norm() > 1e-6) continue;  // skew member
    Z = 0.5 * (Z + Z.transpose());
    const EigDecomp ze = sym_eig(SymMatrix(Z));
    if (ze.lambda_max() < -ze.lambda_min()) Z = -Z;  // orient
    const EigDecomp zo = sym_eig(SymMatrix(Z));
    const double scale = Z.norm();
    if (zo.lambda_min() >= -1e-7 * scale) {
      rep.top_eigvec_matrix = SymMatrix(Z / scale);
      rep.min_eig_of_top = zo.lambda_min() / scale;
      rep.top_residual = (Q * vec(Z / scale) - lam * vec(Z / scale)).norm();
      found = true;
      break;
    }
    // Absolute-spectrum variant V |S| V^T.
    Matrix A = zo.vectors * zo.values.cwiseAbs().asDiagonal() * zo.vectors.transpose();
    A /= A.norm();
    const double resid = (Q * vec(A) - lam * vec(A)).norm();
    if (resid <= resid_tol) {
      rep.top_eigvec_matrix = SymMatrix(A);
      rep.min_eig_of_top = sym_eig(SymMatrix(A)).lambda_min();
      rep.top_residual = resid;
      rep.used_abs_spectrum = true;
      found = true;
      break;
    }
    if (zo.lambda_min() / scale > best_min) {
      best_min = zo.lambda_min() / scale;
      rep.top_eigvec_matrix = SymMatrix(Z / scale);
      rep.min_eig_of_top = best_min;
      rep.top_residual = (Q * vec(Z / scale) - lam * vec(Z / scale)).norm();
    }
  }
  if (!found && rep.top_eigvec_matrix.dim() == 0) {
    // No symmetric member in the top eigenspace; report the raw eigenvector.
    const Matrix Z = unvec(repaired.col(0), d);
    rep.top_eigvec_matrix = SymMatrix(Z);
    rep.min_eig_of_top = sym_eig(SymMatrix(Z)).lambda_min();
    rep.top_residual = (Q * repaired.col(0) - lam * repaired.col(0)).norm();
  }
  return rep;
}

}  // namespace sgdstab
