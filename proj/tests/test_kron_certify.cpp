#include <cmath>

#include <gtest/gtest.h>

#include "sgdstab/kron_certify.hpp"
#include "sgdstab/stability.hpp"

using namespace sgdstab;

namespace {

KronFamily random_family(std::uint64_t seed) {
  Rng rng(seed);
  KronFamily fam;
  fam.dim = 2 + static_cast<Index>(rng() % 3);
  const int m = 1 + static_cast<int>(rng() % 5);
  for (int i = 0; i < m; ++i) {
    const Matrix g = standard_normal(fam.dim, fam.dim, rng);
    fam.members.emplace_back(g + g.transpose());
    fam.weights.push_back(std::uniform_real_distribution<double>(0.05, 1.0)(rng));
  }
  return fam;
}

}  // namespace

TEST(Certify, RandomFamilies) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const KronFamily fam = random_family(seed);
    const CertifyReport rep = certify(fam);
    EXPECT_NEAR(rep.rho, rep.lambda_max, 1e-8 * std::max(1.0, rep.rho)) << seed;
    EXPECT_GE(rep.min_eig_of_top, -1e-7) << seed;
    EXPECT_NEAR(rep.top_eigvec_matrix.matrix().norm(), 1.0, 1e-9);
    EXPECT_LT(rep.top_residual, 1e-7 * std::max(1.0, rep.rho));
    ASSERT_EQ(rep.eigvec_symmetry_defects.size(), static_cast<std::size_t>(fam.dim * fam.dim));
    for (double defect : rep.eigvec_symmetry_defects) EXPECT_LT(defect, 1e-6);
  }
}

TEST(Certify, SingleIndefiniteMember) {
  // Q = Y (x) Y with Y = diag(1, -3): spectrum {1, -3, -3, 9}; top eigvec e2 e2^T.
  Matrix y = Matrix::Zero(2, 2);
  y(0, 0) = 1.0;
  y(1, 1) = -3.0;
  KronFamily fam{2, {SymMatrix(y)}, {}};
  const CertifyReport rep = certify(fam);
  EXPECT_NEAR(rep.lambda_max, 9.0, 1e-12);
  EXPECT_NEAR(rep.rho, 9.0, 1e-12);
  EXPECT_NEAR(std::abs(rep.top_eigvec_matrix(1, 1)), 1.0, 1e-12);
  EXPECT_GE(rep.min_eig_of_top, -1e-12);
}

TEST(Certify, DegenerateTopEigenspaceNeedsPsdMember) {
  // Y = diag(1, -1): Q = Y (x) Y has eigenvalue 1 with multiplicity 2 (e11, e22)
  // and -1 (off-diagonal). The top eigenspace contains the PSD identity.
  Matrix y = Matrix::Zero(2, 2);
  y(0, 0) = 1.0;
  y(1, 1) = -1.0;
  const CertifyReport rep = certify(KronFamily{2, {SymMatrix(y)}, {}});
  EXPECT_NEAR(rep.rho, 1.0, 1e-12);
  EXPECT_NEAR(rep.lambda_max, 1.0, 1e-12);
  EXPECT_GE(rep.min_eig_of_top, -1e-7);
}

TEST(Certify, TransitionFamilyAssemblesToQ) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ProblemInstance inst = gen_interpolating(3, 4, 1 + seed % 3, seed);
    for (int b = 1; b <= 4; ++b) {
      const KronFamily fam = transition_family(inst, 0.7, b);
      double wsum = 0.0;
      for (std::size_t i = 0; i < fam.members.size(); ++i) wsum += fam.weight(i);
      EXPECT_NEAR(wsum, 1.0, 1e-14);
      EXPECT_LT((fam.assemble() - brute_force_Q(inst, 0.7, b)).cwiseAbs().maxCoeff(), 1e-13);
      const CertifyReport rep = certify(fam);
      EXPECT_NEAR(rep.rho, rep.lambda_max, 1e-8 * std::max(1.0, rep.rho));
      EXPECT_GE(rep.min_eig_of_top, -1e-7);
    }
  }
}

TEST(Certify, SymmetryDefectDetectsGenericVectors) {
  Vector z(4);
  z << 1.0, 2.0, 0.0, 1.0;  // Z = [[1, 0], [2, 1]]: neither symmetric nor skew
  EXPECT_GT(detail::symmetry_defect(z, 2), 1.0);
  z << 1.0, 2.0, 2.0, 1.0;
  EXPECT_EQ(detail::symmetry_defect(z, 2), 0.0);
  z << 0.0, 2.0, -2.0, 0.0;
  EXPECT_EQ(detail::symmetry_defect(z, 2), 0.0);
}

TEST(Certify, RejectsBadFamilies) {
  EXPECT_THROW(certify(KronFamily{0, {}, {}}), InvalidArgument);
  EXPECT_THROW(certify(KronFamily{2, {SymMatrix::identity(3)}, {}}), InvalidArgument);
  EXPECT_THROW(certify(KronFamily{2, {SymMatrix::identity(2)}, {-1.0}}), InvalidArgument);
  EXPECT_THROW(transition_family(gen_interpolating(1, 20, 1, 0), 0.1, 10), InvalidArgument);
}
