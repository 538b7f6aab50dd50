#include <cmath>

#include <gtest/gtest.h>

#include "sgdstab/combinatorics.hpp"
#include "sgdstab/linalg.hpp"
#include "sgdstab/random.hpp"

using namespace sgdstab;

namespace {

// Elementwise oracle: (A (x) B)(i p + k, j q + l) = A(i, j) B(k, l).
Matrix kron_loops(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      for (Index k = 0; k < b.rows(); ++k)
        for (Index l = 0; l < b.cols(); ++l) out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
  return out;
}

Matrix random_sym(Index d, Rng& rng) {
  const Matrix g = standard_normal(d, d, rng);
  return g + g.transpose();
}

Matrix random_psd(Index d, Index rank, Rng& rng) {
  const Matrix g = standard_normal(d, rank, rng);
  return g * g.transpose();
}

}  // namespace

TEST(Kron, MatchesElementwiseDefinition) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Matrix a = standard_normal(1 + t % 3, 1 + t % 4, rng);
    const Matrix b = standard_normal(1 + t % 2, 2 + t % 3, rng);
    EXPECT_TRUE(kron(a, b).isApprox(kron_loops(a, b), 0.0) || (kron(a, b) - kron_loops(a, b)).norm() == 0.0);
  }
}

TEST(Kron, IdentityTimesIdentity) {
  EXPECT_EQ(kron(Matrix::Identity(2, 2), Matrix::Identity(3, 3)), Matrix(Matrix::Identity(6, 6)));
}

TEST(Kron, ScalarFactor) {
  const Matrix a = Matrix::Constant(1, 1, 2.0);
  Matrix b(2, 2);
  b << 1, 2, 3, 4;
  EXPECT_EQ(kron(a, b), Matrix(2.0 * b));
}

TEST(Kron, MixedProductProperty) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const Matrix A = standard_normal(3, 2, rng), C = standard_normal(2, 4, rng);
    const Matrix B = standard_normal(2, 3, rng), D = standard_normal(3, 2, rng);
    const Matrix lhs = kron(A, B) * kron(C, D);
    const Matrix rhs = kron(A * C, B * D);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, rhs.cwiseAbs().maxCoeff()));
  }
}

TEST(Kron, VecIdentity) {
  // vec(A X B) = (B^T (x) A) vec(X)
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const Matrix A = standard_normal(3, 3, rng), X = standard_normal(3, 3, rng), B = standard_normal(3, 3, rng);
    const Vector lhs = vec(A * X * B);
    const Vector rhs = kron(B.transpose(), A) * vec(X);
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, rhs.cwiseAbs().maxCoeff()));
  }
}

TEST(KronSum, MatchesDefinitionWithLoopOracle) {
  Rng rng(4);
  for (Index d = 1; d <= 4; ++d) {
    const Matrix a = random_sym(d, rng), b = random_sym(d, rng);
    const Matrix I = Matrix::Identity(d, d);
    const Matrix oracle = kron_loops(a, I) + kron_loops(I, b);
    EXPECT_LT((kron_sum(a, b) - oracle).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(KronSum, EigenvaluesArePairwiseSums) {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 1.0;
  a(1, 1) = 3.0;
  const EigDecomp e = sym_eig(SymMatrix(kron_sum(a, a)));
  EXPECT_NEAR(e.values(0), 6.0, 1e-14);
  EXPECT_NEAR(e.values(1), 4.0, 1e-14);
  EXPECT_NEAR(e.values(2), 4.0, 1e-14);
  EXPECT_NEAR(e.values(3), 2.0, 1e-14);
}

TEST(Vec, ColumnMajorAndRoundTrip) {
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  const Vector v = vec(m);
  ASSERT_EQ(v.size(), 4);
  EXPECT_EQ(v(0), 1);
  EXPECT_EQ(v(1), 3);
  EXPECT_EQ(v(2), 2);
  EXPECT_EQ(v(3), 4);
  EXPECT_EQ(unvec(v, 2), m);
}

TEST(Vec, UnvecRejectsWrongLength) { EXPECT_THROW(unvec(Vector::Zero(5), 2), InvalidArgument); }

TEST(SymMatrix, SymmetrizesAndRejectsNonSquare) {
  Matrix m(2, 2);
  m << 1, 2, 4, 3;
  const SymMatrix s(m);
  EXPECT_EQ(s(0, 1), 3.0);
  EXPECT_EQ(s(1, 0), 3.0);
  EXPECT_THROW(SymMatrix(Matrix::Zero(2, 3)), InvalidArgument);
}

TEST(SymEig, ReconstructsDescendingOrthonormal) {
  Rng rng(5);
  for (Index d = 1; d <= 6; ++d) {
    const Matrix m = random_sym(d, rng);
    const EigDecomp e = sym_eig(SymMatrix(m));
    for (Index i = 1; i < d; ++i) EXPECT_GE(e.values(i - 1), e.values(i));
    const Matrix rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    EXPECT_LT((rec - m).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()));
    EXPECT_LT((e.vectors.transpose() * e.vectors - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(SymEig, KnownTwoByTwo) {
  Matrix m(2, 2);
  m << 2, 1, 1, 2;
  const EigDecomp e = sym_eig(SymMatrix(m));
  EXPECT_NEAR(e.lambda_max(), 3.0, 1e-14);
  EXPECT_NEAR(e.lambda_min(), 1.0, 1e-14);
}

TEST(Pinv, MoorePenroseConditions) {
  Rng rng(6);
  for (Index d = 2; d <= 6; ++d) {
    const Matrix a = random_psd(d, d - 1, rng);
    const Matrix x = pinv_psd(SymMatrix(a)).matrix();
    const double s = std::max(1.0, a.norm());
    EXPECT_LT((a * x * a - a).norm(), 1e-9 * s);
    EXPECT_LT((x * a * x - x).norm(), 1e-9 * std::max(1.0, x.norm()));
    EXPECT_LT((a * x - (a * x).transpose()).norm(), 1e-9);
  }
}

TEST(Pinv, InverseForFullRank) {
  Matrix a(2, 2);
  a << 2, 0, 0, 4;
  const Matrix x = pinv_psd(SymMatrix(a)).matrix();
  EXPECT_NEAR(x(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(x(1, 1), 0.25, 1e-15);
}

TEST(Pinv, ZeroMatrixGivesZero) {
  EXPECT_EQ(pinv_psd(SymMatrix::zero(3)).matrix(), Matrix(Matrix::Zero(3, 3)));
}

TEST(Pinv, RejectsIndefinite) {
  Matrix a(2, 2);
  a << 1, 0, 0, -1;
  EXPECT_THROW(pinv_psd(SymMatrix(a)), InvalidArgument);
}

TEST(PinvSqrt, SquaresToPinv) {
  Rng rng(7);
  const Matrix a = random_psd(4, 2, rng);
  const Matrix r = pinv_sqrt_psd(SymMatrix(a)).matrix();
  const Matrix x = pinv_psd(SymMatrix(a)).matrix();
  EXPECT_LT((r * r - x).norm(), 1e-8 * std::max(1.0, x.norm()));
}

TEST(NullProjectors, ComplementaryIdempotentAnnihilating) {
  Rng rng(8);
  for (Index d = 2; d <= 5; ++d) {
    const Matrix h = random_psd(d, d - 1, rng);
    const NullProjectors np = null_projectors(SymMatrix(h));
    const Matrix& par = np.par.matrix();
    const Matrix& perp = np.perp.matrix();
    EXPECT_LT((par + perp - Matrix::Identity(d, d)).norm(), 1e-12);
    EXPECT_LT((par * par - par).norm(), 1e-12);
    EXPECT_LT((h * par).norm(), 1e-9 * h.norm());
    EXPECT_NEAR(par.trace(), 1.0, 1e-12);
  }
}

TEST(PowerIteration, MatchesDenseEigensolver) {
  Rng rng(9);
  for (Index d = 2; d <= 8; ++d) {
    const Matrix m = random_sym(d, rng);
    const double expected = sym_eig(SymMatrix(m)).lambda_max();
    const double got = power_lambda_max(LinearOperator::from_matrix(m), 1e-14, 2000000, d);
    EXPECT_NEAR(got, expected, 1e-7 * std::max(1.0, std::abs(expected)));
  }
}

TEST(PowerIteration, NegativeDefiniteOperator) {
  Matrix m = Matrix::Zero(3, 3);
  m.diagonal() << -1.0, -2.0, -5.0;
  EXPECT_NEAR(power_lambda_max(LinearOperator::from_matrix(m)), -1.0, 1e-9);
}

TEST(PowerIteration, RejectsNonSelfAdjoint) {
  Matrix m(2, 2);
  m << 1, 5, 0, 1;
  EXPECT_THROW(power_lambda_max(LinearOperator::from_matrix(m)), InvalidArgument);
}

TEST(Combinatorics, BinomialValues) {
  EXPECT_EQ(binomial(5, 2), 10u);
  EXPECT_EQ(binomial(6, 0), 1u);
  EXPECT_EQ(binomial(3, 4), 0u);
  EXPECT_EQ(binomial(20, 10), 184756u);
  EXPECT_EQ(binomial(200, 100), std::numeric_limits<std::uint64_t>::max());
}

TEST(Combinatorics, SubsetsAreLexicographicAndComplete) {
  std::vector<std::vector<int>> seen;
  for_each_subset(5, 3, [&](std::span<const int> s) { seen.emplace_back(s.begin(), s.end()); });
  ASSERT_EQ(seen.size(), 10u);
  EXPECT_EQ(seen.front(), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(seen.back(), (std::vector<int>{2, 3, 4}));
  EXPECT_TRUE(std::is_sorted(seen.begin(), seen.end()));
}
