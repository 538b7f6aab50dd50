#include <cmath>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include "sgdstab/instance.hpp"
#include "sgdstab/stability.hpp"

using namespace sgdstab;

namespace {

Matrix kron_loops(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      for (Index k = 0; k < b.rows(); ++k)
        for (Index l = 0; l < b.cols(); ++l) out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
  return out;
}

/// E[A (x) A] over all size-B subsets, enumerated by bitmask.
Matrix q_oracle(const ProblemInstance& inst, double eta, int batch) {
  const int n = inst.n();
  const Index d = inst.d();
  Matrix acc = Matrix::Zero(d * d, d * d);
  int count = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (__builtin_popcount(mask) != batch) continue;
    Matrix A = Matrix::Identity(d, d);
    for (int i = 0; i < n; ++i)
      if (mask & (1u << i)) A -= (eta / batch) * inst.hessians()[static_cast<std::size_t>(i)].matrix();
    acc += kron_loops(A, A);
    ++count;
  }
  return acc / count;
}

/// lambda_max(C^-1 D) from the generalized symmetric-definite eigenproblem D x = l C x.
double cinv_d_oracle(const ProblemInstance& inst, int batch) {
  const Index d = inst.d();
  const Matrix H = mean_hessian(inst).matrix();
  const Matrix I = Matrix::Identity(d, d);
  const double p = (inst.n() == 1) ? 0.0 : double(inst.n() - batch) / (batch * (inst.n() - 1));
  const Matrix C = 0.5 * (kron_loops(H, I) + kron_loops(I, H));
  Matrix mean_sq = Matrix::Zero(d * d, d * d);
  for (const auto& h : inst.hessians()) mean_sq += kron_loops(h.matrix(), h.matrix());
  mean_sq /= inst.n();
  const Matrix D = (1.0 - p) * kron_loops(H, H) + p * mean_sq;
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(D, C);
  return es.eigenvalues().maxCoeff();
}

double rel_err(double a, double b) { return std::abs(a - b) / std::abs(b); }

ProblemInstance full_rank_interpolating(std::uint64_t seed) {
  Rng rng(seed);
  const int d = 1 + static_cast<int>(rng() % 4);
  const int n = 2 + static_cast<int>(rng() % 5);
  const int rank = std::min<int>(d, std::max<int>(1 + static_cast<int>(rng() % d), (d + n - 1) / n));
  return gen_interpolating(d, n, rank, rng());
}

}  // namespace

// --- Closed forms on S1 (d=1, n=2, H = {1, 3}) ---

TEST(ScalarInstance, ThresholdsAndBounds) {
  const ProblemInstance s1 = fixtures::s1();
  EXPECT_NEAR(eta_star_mean(s1), 1.0, 1e-12);
  EXPECT_NEAR(eta_star_var(s1, 1), 0.8, 1e-12);
  EXPECT_NEAR(eta_star_var(s1, 2), 1.0, 1e-12);
  EXPECT_NEAR(necessary_bound_vmax(s1, 1), 0.8, 1e-12);
  EXPECT_NEAR(necessary_bound_trace(s1, 1), 0.8, 1e-12);
  EXPECT_NEAR(optimized_rank_one_bound(s1, 1).value, 2.5, 1e-12);
  EXPECT_NEAR(vmax_sharpness_bound(s1, 1), 2.5, 1e-12);
}

TEST(ScalarInstance, CDE) {
  const SpectralReport r1 = build_CDE(fixtures::s1(), 1);
  EXPECT_NEAR(r1.C(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(r1.D(0, 0), 5.0, 1e-15);
  EXPECT_NEAR(r1.E(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(r1.lambda_max_CdagD, 2.5, 1e-14);
  const SpectralReport r2 = build_CDE(fixtures::s1(), 2);
  EXPECT_NEAR(r2.D(0, 0), 4.0, 1e-15);
}

TEST(ScalarInstance, Q) {
  EXPECT_NEAR(build_Q(fixtures::s1(), 0.5, 1)(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(build_Q(fixtures::s1(), 0.5, 2)(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(brute_force_Q(fixtures::s1(), 0.5, 1)(0, 0), 0.25, 1e-15);
  EXPECT_EQ(build_Q(fixtures::s1(), 0.0, 1), Matrix(Matrix::Identity(1, 1)));
}

TEST(ScalarInstance, MeanHessian) { EXPECT_NEAR(mean_hessian(fixtures::s1())(0, 0), 2.0, 1e-15); }

// --- Q against the enumeration oracle ---

TEST(Q, AllFormsMatchEnumerationOracle) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Rng rng(seed);
    const int d = 1 + static_cast<int>(rng() % 4);
    const int n = 1 + static_cast<int>(rng() % 6);
    const ProblemInstance inst = gen_interpolating(d, n, 1 + static_cast<Index>(rng() % d), rng());
    for (int b = 1; b <= n; ++b)
      for (double eta : {0.0, 0.05, 0.3, 1.0, 2.5}) {
        const Matrix oracle = q_oracle(inst, eta, b);
        const QForms q = q_forms(inst, eta, b);
        const double tol = 1e-10 * std::max(1.0, oracle.cwiseAbs().maxCoeff());
        EXPECT_LT((q.kron_expansion - oracle).cwiseAbs().maxCoeff(), tol);
        EXPECT_LT((q.mixture - oracle).cwiseAbs().maxCoeff(), tol);
        EXPECT_LT((q.identity_form - oracle).cwiseAbs().maxCoeff(), tol);
        EXPECT_LT((brute_force_Q(inst, eta, b) - oracle).cwiseAbs().maxCoeff(), tol);
      }
  }
}

TEST(Q, OperatorMatchesDense) {
  const ProblemInstance inst = gen_interpolating(3, 5, 2, 8);
  for (int b : {1, 3, 5}) {
    const Matrix Q = build_Q(inst, 0.4, b);
    const LinearOperator op = q_operator(inst, 0.4, b);
    Rng rng(1);
    for (int k = 0; k < 5; ++k) {
      const Vector x = standard_normal(9, rng);
      EXPECT_LT((op(x) - Q * x).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Q, OperatorLambdaMaxOnScalarInstance) {
  const double dense = lambda_max(SymMatrix(build_Q(fixtures::s1(), 0.5, 1)));
  EXPECT_NEAR(power_lambda_max(q_operator(fixtures::s1(), 0.5, 1)), dense, 1e-7);
}

TEST(Q, BruteForceCap) {
  const ProblemInstance inst = gen_interpolating(1, 20, 1, 0);
  EXPECT_THROW(brute_force_Q(inst, 0.1, 10), InvalidArgument);
}

// --- eta*_var ---

TEST(EtaVar, MatchesGeneralizedEigenOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ProblemInstance inst = full_rank_interpolating(seed);
    for (int b = 1; b <= inst.n(); ++b)
      EXPECT_LT(rel_err(generalized_sharpness(inst, b), cinv_d_oracle(inst, b)), 1e-9) << seed << " B=" << b;
  }
}

TEST(EtaVar, OperatorPathMatchesDense) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const ProblemInstance inst = gen_interpolating(4, 5, 1 + seed % 4, seed);
    for (int b : {1, 2, 5}) {
      EtaVarOptions dense, op;
      dense.path = ComputePath::Dense;
      op.path = ComputePath::Operator;
      EXPECT_LT(rel_err(eta_star_var(inst, b, op), eta_star_var(inst, b, dense)), 1e-7) << seed;
    }
  }
}

TEST(EtaVar, GradientDescentRecovery) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int d = 1 + static_cast<int>(rng() % 6);
    const int n = 1 + static_cast<int>(rng() % 10);
    const ProblemInstance inst = gen_interpolating(d, n, 1 + static_cast<Index>(rng() % d), rng());
    EXPECT_LT(rel_err(eta_star_var(inst, n), 2.0 / lambda_max(mean_hessian(inst))), 1e-9);
  }
}

TEST(EtaVar, SpectrumCrossesOneAtThreshold) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ProblemInstance inst = full_rank_interpolating(seed + 100);
    const int b = 1 + static_cast<int>(seed % inst.n());
    const double th = eta_star_var(inst, b);
    auto top = [&](double eta) { return lambda_max(SymMatrix(q_oracle(inst, eta, b))); };
    EXPECT_NEAR(top(th), 1.0, 1e-7);
    EXPECT_LT(top(0.99 * th), 1.0);
    EXPECT_GT(top(1.01 * th), 1.0);
  }
}

TEST(EtaVar, MonotoneInBatch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int d = 1 + static_cast<int>(rng() % 4);
    const int n = 2 + static_cast<int>(rng() % 7);
    const ProblemInstance inst = gen_interpolating(d, n, 1 + static_cast<Index>(rng() % d), rng());
    double prev = 0.0;
    for (int b = 1; b <= n; ++b) {
      const double cur = eta_star_var(inst, b);
      EXPECT_GE(cur, prev * (1.0 - 1e-9));
      prev = cur;
    }
  }
}

TEST(EtaVar, BelowMeanThreshold) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ProblemInstance inst = gen_interpolating(3, 6, 2, seed);
    for (int b = 1; b <= 6; ++b) EXPECT_LE(eta_star_var(inst, b), eta_star_mean(inst) * (1.0 + 1e-12));
  }
}

TEST(EtaVar, ScaleCovariance) {
  // Scaling every H_i by c scales eta*_var by 1/c.
  const ProblemInstance inst = gen_interpolating(3, 4, 1, 3);
  EXPECT_LT(rel_err(eta_star_var(inst.scaled_hessians(4.0), 1), eta_star_var(inst, 1) / 4.0), 1e-10);
}

TEST(EtaVar, RejectsInvalid) {
  const ProblemInstance bad({Matrix::Constant(1, 1, -1.0), Matrix::Constant(1, 1, 3.0)},
                            {Vector::Zero(1), Vector::Zero(1)});
  EXPECT_THROW(eta_star_var(bad, 1), InvalidArgument);
}

TEST(EtaVar, ZeroHessiansGiveInfinity) {
  const ProblemInstance zero({Matrix::Zero(2, 2), Matrix::Zero(2, 2)}, {Vector::Zero(2), Vector::Zero(2)});
  EXPECT_TRUE(std::isinf(eta_star_var(zero, 1)));
  EXPECT_TRUE(std::isinf(eta_star_mean(zero)));
}

// --- Bounds ---

TEST(Bounds, ChainOrdering) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const int d = 1 + static_cast<int>(rng() % 4);
    const int n = 2 + static_cast<int>(rng() % 5);
    const ProblemInstance inst = gen_interpolating(d, n, 1 + static_cast<Index>(rng() % d), rng());
    for (int b : {1, n}) {
      const double gs = generalized_sharpness(inst, b);
      const double r1 = optimized_rank_one_bound(inst, b).value;
      const double v = vmax_sharpness_bound(inst, b);
      const double h = lambda_max(mean_hessian(inst));
      EXPECT_GE(gs, r1 * (1 - 1e-9));
      EXPECT_GE(r1, v * (1 - 1e-9));
      EXPECT_GE(v, h * (1 - 1e-9));
    }
  }
}

TEST(Bounds, NecessaryBoundsDominateThreshold) {
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    const ProblemInstance inst = gen_interpolating(3, 5, 1 + seed % 3, seed);
    for (int b = 1; b <= 5; ++b) {
      const double th = eta_star_var(inst, b);
      EXPECT_LE(th, necessary_bound_vmax(inst, b) * (1 + 1e-9));
      EXPECT_LE(th, necessary_bound_trace(inst, b) * (1 + 1e-9));
    }
  }
}

TEST(Bounds, TraceBoundMatchesDirectFormula) {
  const ProblemInstance inst = gen_interpolating(3, 4, 2, 21);
  const int b = 2;
  const double p = 2.0 / (2.0 * 3.0);
  const Matrix H = mean_hessian(inst).matrix();
  double fro = 0.0;
  for (const auto& h : inst.hessians()) fro += h.matrix().squaredNorm();
  const double expected = 2.0 * H.trace() / ((1 - p) * H.squaredNorm() + p * fro / 4.0);
  EXPECT_LT(rel_err(necessary_bound_trace(inst, b), expected), 1e-12);
}

TEST(Bounds, RankOneObjectiveAtReturnedVector) {
  const ProblemInstance inst = gen_interpolating(4, 5, 2, 2);
  const RankOneResult r = optimized_rank_one_bound(inst, 1);
  ASSERT_NEAR(r.v.norm(), 1.0, 1e-12);
  const Matrix H = mean_hessian(inst).matrix();
  const double a = r.v.dot(H * r.v);
  double s = 0.0;
  for (const auto& h : inst.hessians()) s += std::pow(r.v.dot(h.matrix() * r.v) - a, 2);
  s /= inst.n();
  EXPECT_LT(rel_err(r.value, a + p_of_batch(5, 1) * s / a), 1e-12);
}

TEST(Bounds, RankOneDeterministic) {
  const ProblemInstance inst = gen_interpolating(3, 5, 1, 12);
  EXPECT_EQ(optimized_rank_one_bound(inst, 2).value, optimized_rank_one_bound(inst, 2).value);
}

TEST(Bounds, GradientDescentCollapse) {
  // With B = n the whole chain collapses to lambda_max(H).
  const ProblemInstance inst = gen_interpolating(3, 4, 2, 30);
  const double h = lambda_max(mean_hessian(inst));
  EXPECT_LT(rel_err(generalized_sharpness(inst, 4), h), 1e-10);
  EXPECT_LT(rel_err(vmax_sharpness_bound(inst, 4), h), 1e-12);
  EXPECT_LT(rel_err(optimized_rank_one_bound(inst, 4).value, h), 1e-9);
}

// --- Verdict ---

TEST(Verdict, ClassifiesEtas) {
  const StabilityVerdict v = verdict(fixtures::s1(), 1, {0.5, 0.9, 1.2});
  ASSERT_EQ(v.etas.size(), 3u);
  EXPECT_TRUE(v.etas[0].mean_stable && v.etas[0].var_stable);
  EXPECT_TRUE(v.etas[1].mean_stable && !v.etas[1].var_stable);
  EXPECT_TRUE(!v.etas[2].mean_stable && !v.etas[2].var_stable);
  EXPECT_LT(v.etas[0].perp_q_lambda_max, 1.0);
  EXPECT_GT(v.etas[1].perp_q_lambda_max, 1.0);
  EXPECT_NEAR(v.eta_star_var, 0.8, 1e-12);
  EXPECT_NEAR(v.bound_vmax, 0.8, 1e-12);
  EXPECT_NEAR(v.bound_trace, 0.8, 1e-12);
  EXPECT_NEAR(v.bound_rank_one, 0.8, 1e-12);
}

TEST(Verdict, ProjectedSpectrumAgreesWithThresholdOnRankDeficient) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ProblemInstance inst = gen_interpolating(4, 2, 1, seed);  // rank(H) <= 2 < 4
    const double th = eta_star_var(inst, 1);
    EXPECT_NO_THROW(verdict(inst, 1, {0.5 * th, 0.98 * th, 1.02 * th, 2.0 * th}));
  }
}

TEST(Verdict, RejectsNonPositiveEta) { EXPECT_THROW(verdict(fixtures::s1(), 1, {0.0}), InvalidArgument); }
