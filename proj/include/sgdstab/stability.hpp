#pragma once

// Mean-square linear stability of SGD around a minimum.
//
// With H = mean(H_i) and p = (n - B) / (B (n - 1)):
//   C = 1/2 (H (+) H)
//   D = (1 - p) H (x) H + p mean(H_i (x) H_i)
//   E = mean((H_i - H) (x) (H_i - H)),          D = H (x) H + p E
//   Q = E[A (x) A] = I - 2 eta C + eta^2 D,      A = I - (eta / B) sum_{i in batch} H_i
// and the exact mean-square threshold is eta*_var = 2 / lambda_max(C^+ D).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "sgdstab/combinatorics.hpp"
#include "sgdstab/error.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/linalg.hpp"
#include "sgdstab/random.hpp"

namespace sgdstab {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Default cap on C(n, B) for exhaustive batch enumeration.
inline constexpr std::uint64_t kEnumerationCap = 10000;

inline SymMatrix mean_hessian(const ProblemInstance& inst) {
  Matrix h = Matrix::Zero(inst.d(), inst.d());
  for (const auto& hi : inst.hessians()) h += hi.matrix();
  return SymMatrix(h / static_cast<double>(inst.n()));
}

namespace detail {

inline void require_valid(const ProblemInstance& inst, double rel_tol, const char* what) {
  if (classify(inst, rel_tol) == MinimumClass::Invalid)
    throw InvalidArgument(std::string(what) +
                          ": instance is not a regular minimum (non-PSD Hessian or nonzero mean "
                          "gradient)");
}

inline void require_dense(Index d, const char* what) {
  if (d > kDenseCap)
    throw InvalidArgument(std::string(what) + ": d = " + std::to_string(d) +
                          " exceeds the dense cap of " + std::to_string(kDenseCap));
}

inline Matrix mean_kron_square(const ProblemInstance& inst) {
  const Index d2 = inst.d() * inst.d();
  Matrix out = Matrix::Zero(d2, d2);
  for (const auto& hi : inst.hessians()) out += kron(hi.matrix(), hi.matrix());
  return out / static_cast<double>(inst.n());
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace detail

// ---------------------------------------------------------------------------
// C, D, E
// ---------------------------------------------------------------------------

struct SpectralReport {
  SymMatrix H;
  Matrix C;
  Matrix D;
  Matrix E;
  double lambda_max_H = 0.0;
  double lambda_max_CdagD = 0.0;
  double p = 0.0;
  int batch = 1;
  double rel_tol = kDefaultRankTol;
};

/// lambda_max(C^+ D) through the symmetric similar form (C^1/2)^+ D (C^1/2)^+.
inline double lambda_max_cdag_d_dense(const Matrix& C, const Matrix& D,
                                      double rel_tol = kDefaultRankTol) {
  const Matrix s = pinv_sqrt_psd(SymMatrix(C), rel_tol).matrix();
  const Matrix S = s * D * s;
  return lambda_max(SymMatrix(S));
}

/// Builds C, D and E densely. Asserts D == H (x) H + p E.
inline SpectralReport build_CDE(const ProblemInstance& inst, int batch,
                                double rel_tol = kDefaultRankTol) {
  detail::require_valid(inst, rel_tol, "build_CDE");
  detail::require_dense(inst.d(), "build_CDE");
  const Index d = inst.d();

  SpectralReport r;
  r.p = p_of_batch(inst.n(), batch);
  r.batch = batch;
  r.rel_tol = rel_tol;
  r.H = mean_hessian(inst);
  const Matrix& H = r.H.matrix();
  const Matrix HH = kron(H, H);

  r.C = 0.5 * kron_sum(H, H);
  r.D = (1.0 - r.p) * HH + r.p * detail::mean_kron_square(inst);
  r.E = Matrix::Zero(d * d, d * d);
  for (const auto& hi : inst.hessians()) {
    const Matrix dev = hi.matrix() - H;
    r.E += kron(dev, dev);
  }
  r.E /= static_cast<double>(inst.n());

  const double defect = detail::max_abs(r.D - HH - r.p * r.E);
  if (defect > 1e-10 * std::max(1.0, detail::max_abs(r.D)))
    throw NumericalFailure("build_CDE: D != H(x)H + pE (defect " + std::to_string(defect) + ")");

  r.lambda_max_H = lambda_max(r.H);
  r.lambda_max_CdagD = lambda_max_cdag_d_dense(r.C, r.D, rel_tol);
  return r;
}

// ---------------------------------------------------------------------------
// Q
// ---------------------------------------------------------------------------

/// The three algebraic forms of Q(eta, B).
struct QForms {
  Matrix kron_expansion;  // (I - eta H)(x)(I - eta H) + p eta^2 mean(H_i(x)H_i - H(x)H)
  Matrix mixture;         // (1 - p)(I - eta H)(x)(I - eta H) + p mean((I - eta H_i)(x)(I - eta H_i))
  Matrix identity_form;   // I - 2 eta C + eta^2 D
};

inline QForms q_forms(const ProblemInstance& inst, double eta, int batch) {
  detail::require_dense(inst.d(), "build_Q");
  const Index d = inst.d();
  const double p = p_of_batch(inst.n(), batch);
  const Matrix I = Matrix::Identity(d, d);
  const Matrix H = mean_hessian(inst).matrix();
  const Matrix A = I - eta * H;
  const Matrix AA = kron(A, A);
  const Matrix HH = kron(H, H);
  const Matrix HiHi = detail::mean_kron_square(inst);

  QForms q;
  q.kron_expansion = AA + p * eta * eta * (HiHi - HH);

  Matrix single = Matrix::Zero(d * d, d * d);
  for (const auto& hi : inst.hessians()) {
    const Matrix Ai = I - eta * hi.matrix();
    single += kron(Ai, Ai);
  }
  single /= static_cast<double>(inst.n());
  q.mixture = (1.0 - p) * AA + p * single;

  const Matrix C = 0.5 * kron_sum(H, H);
  const Matrix D = (1.0 - p) * HH + p * HiHi;
  q.identity_form = Matrix::Identity(d * d, d * d) - 2.0 * eta * C + eta * eta * D;
  return q;
}

/// Largest pairwise entrywise disagreement among the three forms.
inline double q_forms_defect(const QForms& q) {
  return std::max({detail::max_abs(q.kron_expansion - q.mixture),
                   detail::max_abs(q.kron_expansion - q.identity_form),
                   detail::max_abs(q.mixture - q.identity_form)});
}

/// Dense Q(eta, B). Asserts the three algebraic forms agree within 1e-10.
inline Matrix build_Q(const ProblemInstance& inst, double eta, int batch) {
  if (!(eta >= 0.0)) throw InvalidArgument("build_Q: eta must be >= 0");
  const QForms q = q_forms(inst, eta, batch);
  const double defect = q_forms_defect(q);
  if (defect > 1e-10 * std::max(1.0, detail::max_abs(q.mixture)))
    throw NumericalFailure("build_Q: algebraic forms of Q disagree by " + std::to_string(defect));
  return q.mixture;
}

/// Matrix-free Q acting on vec(Sigma):
/// Sigma -> (1 - p) A Sigma A + p mean(A_i Sigma A_i).
inline LinearOperator q_operator(const ProblemInstance& inst, double eta, int batch) {
  const Index d = inst.d();
  const double p = p_of_batch(inst.n(), batch);
  const Matrix I = Matrix::Identity(d, d);
  Matrix A = I - eta * mean_hessian(inst).matrix();
  std::vector<Matrix> Ai;
  for (const auto& hi : inst.hessians()) Ai.push_back(I - eta * hi.matrix());
  const double inv_n = 1.0 / static_cast<double>(inst.n());
  return {d * d, d * d,
          [d, p, inv_n, A = std::move(A), Ai = std::move(Ai)](const Vector& x) -> Vector {
            const Matrix S = unvec(x, d);
            Matrix out = (1.0 - p) * (A * S * A);
            if (p != 0.0) {
              Matrix acc = Matrix::Zero(d, d);
              for (const Matrix& a : Ai) acc.noalias() += a * S * a;
              out += (p * inv_n) * acc;
            }
            return vec(out);
          }};
}

/// Exact E[A (x) A] by enumerating all C(n, B) equiprobable batches.
inline Matrix brute_force_Q(const ProblemInstance& inst, double eta, int batch,
                            std::uint64_t cap = kEnumerationCap) {
  const int n = inst.n();
  p_of_batch(n, batch);  // range check
  const std::uint64_t count = binomial(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(batch));
  if (count > cap)
    throw InvalidArgument("brute_force_Q: C(n, B) = " + std::to_string(count) +
                          " exceeds the enumeration cap " + std::to_string(cap));
  const Index d = inst.d();
  Matrix acc = Matrix::Zero(d * d, d * d);
  for_each_subset(n, batch, [&](std::span<const int> b) {
    Matrix A = Matrix::Identity(d, d);
    for (int i : b) A -= (eta / batch) * inst.hessians()[static_cast<std::size_t>(i)].matrix();
    acc += kron(A, A);
  });
  return acc / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Thresholds
// ---------------------------------------------------------------------------

/// eta*_mean = 2 / lambda_max(H); +inf when H has no positive eigenvalue.
inline double eta_star_mean(const ProblemInstance& inst) {
  const double top = lambda_max(mean_hessian(inst));
  return top > 0.0 ? 2.0 / top : kInfinity;
}

enum class ComputePath { Auto, Dense, Operator };

struct EtaVarOptions {
  ComputePath path = ComputePath::Auto;
  double rel_tol = kDefaultRankTol;
  double power_tol = 1e-14;
  int power_max_iter = 500000;
  std::uint64_t seed = 0;
};

/// Self-adjoint operator u -> (C^1/2)^+ D (C^1/2)^+ u, applied in the
/// eigenbasis of H where C is diagonal with entries (lambda_i + lambda_j) / 2.
inline LinearOperator cdag_d_operator(const ProblemInstance& inst, int batch,
                                      double rel_tol = kDefaultRankTol) {
  const Index d = inst.d();
  const double p = p_of_batch(inst.n(), batch);
  const EigDecomp eig = sym_eig(mean_hessian(inst), rel_tol);
  const Matrix& V = eig.vectors;
  const double cut = rel_tol * std::max(eig.lambda_max(), 0.0);

  Matrix scale(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) {
      const double c = 0.5 * (eig.values(i) + eig.values(j));
      scale(i, j) = c > cut ? 1.0 / std::sqrt(c) : 0.0;
    }
  const Vector lambda = eig.values;
  std::vector<Matrix> rotated;
  for (const auto& hi : inst.hessians()) rotated.push_back(V.transpose() * hi.matrix() * V);
  const double inv_n = 1.0 / static_cast<double>(inst.n());

  return {d * d, d * d,
          [d, p, inv_n, scale, lambda, rotated = std::move(rotated)](const Vector& u) -> Vector {
            const Matrix Z = unvec(u, d).cwiseProduct(scale);
            Matrix W = (1.0 - p) * (lambda.asDiagonal() * Z * lambda.asDiagonal());
            if (p != 0.0) {
              Matrix acc = Matrix::Zero(d, d);
              for (const Matrix& h : rotated) acc.noalias() += h * Z * h;
              W += (p * inv_n) * acc;
            }
            return vec(W.cwiseProduct(scale));
          }};
}

/// Generalized sharpness lambda_max(C^+ D).
inline double generalized_sharpness(const ProblemInstance& inst, int batch,
                                    const EtaVarOptions& opts = {}) {
  detail::require_valid(inst, opts.rel_tol, "eta_star_var");
  const bool dense = opts.path == ComputePath::Dense ||
                     (opts.path == ComputePath::Auto && inst.d() <= kDenseCap);
  if (dense) {
    detail::require_dense(inst.d(), "eta_star_var");
    const Matrix H = mean_hessian(inst).matrix();
    const double p = p_of_batch(inst.n(), batch);
    const Matrix C = 0.5 * kron_sum(H, H);
    const Matrix D = (1.0 - p) * kron(H, H) + p * detail::mean_kron_square(inst);
    return lambda_max_cdag_d_dense(C, D, opts.rel_tol);
  }
  return power_lambda_max(cdag_d_operator(inst, batch, opts.rel_tol), opts.power_tol,
                          opts.power_max_iter, opts.seed);
}

/// Exact mean-square threshold eta*_var = 2 / lambda_max(C^+ D); +inf when D
/// vanishes numerically.
inline double eta_star_var(const ProblemInstance& inst, int batch, const EtaVarOptions& opts = {}) {
  const double g = generalized_sharpness(inst, batch, opts);
  return g > 0.0 ? 2.0 / g : kInfinity;
}

/// Lower bound on lambda_max(C^+ D) obtained from the top eigenvector of H:
/// lambda_max(H) + p mean((v^T H_i v - lambda_max(H))^2) / lambda_max(H).
inline double vmax_sharpness_bound(const ProblemInstance& inst, int batch) {
  const double p = p_of_batch(inst.n(), batch);
  const EigDecomp eig = sym_eig(mean_hessian(inst));
  const double top = eig.lambda_max();
  if (!(top > 0.0)) throw InvalidArgument("necessary_bound_vmax: lambda_max(H) must be positive");
  const Vector v = eig.vectors.col(0);
  double s = 0.0;
  for (const auto& hi : inst.hessians()) {
    const double dev = v.dot(hi.matrix() * v) - top;
    s += dev * dev;
  }
  s /= static_cast<double>(inst.n());
  return top + p * s / top;
}

/// Necessary condition eta*_var <= 2 lambda / (lambda^2 + p/n sum (v^T H_i v - lambda)^2).
inline double necessary_bound_vmax(const ProblemInstance& inst, int batch) {
  return 2.0 / vmax_sharpness_bound(inst, batch);
}

/// Necessary condition eta*_var <= 2 Tr(H) / ((1 - p)|H|_F^2 + p/n sum |H_i|_F^2).
inline double necessary_bound_trace(const ProblemInstance& inst, int batch) {
  const double p = p_of_batch(inst.n(), batch);
  const Matrix H = mean_hessian(inst).matrix();
  const double tr = H.trace();
  if (!(tr > 0.0)) throw InvalidArgument("necessary_bound_trace: Tr(H) must be positive");
  double fro = 0.0;
  for (const auto& hi : inst.hessians()) fro += hi.matrix().squaredNorm();
  fro /= static_cast<double>(inst.n());
  return 2.0 * tr / ((1.0 - p) * H.squaredNorm() + p * fro);
}

// ---------------------------------------------------------------------------
// Rank-one optimized bound
// ---------------------------------------------------------------------------

struct RankOneOptions {
  int steps = 2000;
  int starts = 8;
  double gamma0 = 0.1;
  std::uint64_t seed = 0;
  double rel_tol = kDefaultRankTol;
};

struct RankOneResult {
  double value = 0.0;
  Vector v;
  int best_start = 0;
};

namespace detail {

struct RankOneObjective {
  Matrix H;
  std::vector<Matrix> Hi;
  double p = 0.0;

  /// f(v) = v^T H v + p mean((v^T H_i v - v^T H v)^2) / v^T H v and its
  /// Euclidean gradient. Returns false when v^T H v is not positive.
  bool eval(const Vector& v, double& f, Vector& grad, double floor) const {
    const Vector Hv = H * v;
    const double a = v.dot(Hv);
    if (!(a > floor)) return false;
    const double inv_n = 1.0 / static_cast<double>(Hi.size());
    double s = 0.0;
    Vector ds = Vector::Zero(v.size());
    for (const Matrix& h : Hi) {
      const Vector hv = h * v;
      const double dev = v.dot(hv) - a;
      s += dev * dev;
      ds += (4.0 * dev) * (hv - Hv);
    }
    s *= inv_n;
    ds *= inv_n;
    f = a + p * s / a;
    grad = 2.0 * Hv + p * (ds / a - (2.0 * s / (a * a)) * Hv);
    return true;
  }
};

}  // namespace detail

/// Maximizes the rank-one restriction of the generalized sharpness over the
/// unit sphere by geodesic gradient ascent with a decaying step
/// gamma_k = gamma0 / (1 + k / K), K = steps / 10. The first start is the top
/// eigenvector of H, the rest are seeded random directions in range(H). The
/// angular step is gamma_k * |grad_R| / f, which keeps it scale-free.
inline RankOneResult optimized_rank_one_bound(const ProblemInstance& inst, int batch,
                                              const RankOneOptions& opts = {}) {
  detail::RankOneObjective obj;
  obj.H = mean_hessian(inst).matrix();
  for (const auto& hi : inst.hessians()) obj.Hi.push_back(hi.matrix());
  obj.p = p_of_batch(inst.n(), batch);

  const EigDecomp eig = sym_eig(SymMatrix(obj.H), opts.rel_tol);
  const double top = eig.lambda_max();
  if (!(top > 0.0)) throw InvalidArgument("optimized_rank_one_bound: lambda_max(H) must be positive");
  const double floor = opts.rel_tol * top;
  const Matrix perp = null_projectors(SymMatrix(obj.H), opts.rel_tol).perp.matrix();
  const Index d = inst.d();
  const double K = std::max(1.0, opts.steps / 10.0);

  RankOneResult best;
  best.value = -kInfinity;
  bool any = false;
  Rng rng(stream_seed(opts.seed, 17));

  for (int start = 0; start < std::max(1, opts.starts); ++start) {
    Vector v;
    if (start == 0) {
      v = eig.vectors.col(0);
    } else {
      v = perp * standard_normal(d, rng);
      if (v.norm() <= 1e-12) continue;
      v.normalize();
    }
    double f = 0.0;
    Vector g;
    if (!obj.eval(v, f, g, floor)) continue;
    any = true;
    if (f > best.value) best = {f, v, start};
    for (int k = 0; k < opts.steps; ++k) {
      Vector rg = g - v.dot(g) * v;
      const double rn = rg.norm();
      if (rn <= 1e-15 * std::max(1.0, f)) break;
      const double angle = (opts.gamma0 / (1.0 + k / K)) * rn / f;
      Vector next = std::cos(angle) * v + std::sin(angle) * (rg / rn);
      next.normalize();
      double fn = 0.0;
      Vector gn;
      if (!obj.eval(next, fn, gn, floor)) break;
      v = std::move(next);
      f = fn;
      g = std::move(gn);
      if (f > best.value) best = {f, v, start};
    }
  }
  if (!any)
    throw NumericalFailure("optimized_rank_one_bound: every start is degenerate (v^T H v ~ 0)");
  return best;
}

// ---------------------------------------------------------------------------
// Verdict
// ---------------------------------------------------------------------------

struct EtaClassification {
  double eta = 0.0;
  bool mean_stable = false;
  bool var_stable = false;
  /// lambda_max((P_perp (x) P_perp) Q(eta)); NaN when not computed densely.
  double perp_q_lambda_max = std::numeric_limits<double>::quiet_NaN();
};

struct StabilityVerdict {
  double eta_star_mean = 0.0;
  double eta_star_var = 0.0;
  double bound_vmax = 0.0;
  double bound_trace = 0.0;
  double bound_rank_one = 0.0;
  double lambda_max_H = 0.0;
  double generalized_sharpness = 0.0;  // 2 / eta_star_var
  double rank_one_value = 0.0;
  double vmax_value = 0.0;
  double p = 0.0;
  int batch = 1;
  std::vector<EtaClassification> etas;
};

struct VerdictOptions {
  EtaVarOptions eta_var;
  RankOneOptions rank_one;
  /// Check lambda_max((P (x) P) Q) < 1 <=> eta < eta*_var on each eta (dense only).
  bool check_spectrum = true;
};

/// (P_perp (x) P_perp) Q(eta), symmetrized.
inline Matrix projected_q(const ProblemInstance& inst, double eta, int batch,
                          double rel_tol = kDefaultRankTol) {
  const Matrix P = null_projectors(mean_hessian(inst), rel_tol).perp.matrix();
  const Matrix PQ = kron(P, P) * build_Q(inst, eta, batch);
  return 0.5 * (PQ + PQ.transpose());
}

inline StabilityVerdict verdict(const ProblemInstance& inst, int batch,
                                const std::vector<double>& eta_list,
                                const VerdictOptions& opts = {}) {
  detail::require_valid(inst, opts.eta_var.rel_tol, "verdict");
  StabilityVerdict v;
  v.batch = batch;
  v.p = p_of_batch(inst.n(), batch);
  v.lambda_max_H = lambda_max(mean_hessian(inst));
  v.eta_star_mean = eta_star_mean(inst);
  v.generalized_sharpness = generalized_sharpness(inst, batch, opts.eta_var);
  v.eta_star_var = v.generalized_sharpness > 0.0 ? 2.0 / v.generalized_sharpness : kInfinity;
  v.vmax_value = vmax_sharpness_bound(inst, batch);
  v.bound_vmax = 2.0 / v.vmax_value;
  v.bound_trace = necessary_bound_trace(inst, batch);
  v.rank_one_value = optimized_rank_one_bound(inst, batch, opts.rank_one).value;
  v.bound_rank_one = 2.0 / v.rank_one_value;

  const bool dense = inst.d() <= kDenseCap && opts.eta_var.path != ComputePath::Operator;
  for (double eta : eta_list) {
    if (!(eta > 0.0)) throw InvalidArgument("verdict: step sizes must be positive");
    EtaClassification c;
    c.eta = eta;
    c.mean_stable = eta <= v.eta_star_mean;
    c.var_stable = eta <= v.eta_star_var;
    if (dense && opts.check_spectrum) {
      c.perp_q_lambda_max = lambda_max(SymMatrix(projected_q(inst, eta, batch, opts.eta_var.rel_tol)));
      const double gap = (eta - v.eta_star_var) / v.eta_star_var;
      const bool below_one = c.perp_q_lambda_max < 1.0;
      if (std::abs(gap) > 1e-6 && below_one != (gap < 0.0))
        throw NumericalFailure("verdict: spectral test disagrees with eta*_var at eta = " +
                               std::to_string(eta));
    }
    v.etas.push_back(c);
  }
  return v;
}

}  // namespace sgdstab
