#pragma once

// Exact first- and second-moment dynamics of linearized SGD,
//   theta_{t+1} - theta* = A_t (theta_t - theta*) - v_t,
//   A_t = I - (eta / B) sum_{i in b_t} H_i,  v_t = (eta / B) sum_{i in b_t} g_i,
// which give
//   mu_{t+1}       = (I - eta H) mu_t
//   vec(Sigma_{t+1}) = Q vec(Sigma_t) - (E[v (x) A] + E[A (x) v]) mu_t + vec(Sigma_v),
// with Sigma_v = eta^2 p Sigma_g and Sigma_g = mean(g_i g_i^T).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sgdstab/combinatorics.hpp"
#include "sgdstab/error.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/linalg.hpp"
#include "sgdstab/random.hpp"
#include "sgdstab/stability.hpp"

namespace sgdstab {

/// First and second moments of theta_t - theta* at step t.
struct MomentState {
  Vector mu;
  SymMatrix sigma;
  long t = 0;

  static MomentState zero(Index d) { return {Vector::Zero(d), SymMatrix::zero(d), 0}; }

  /// Deterministic start at offset x0: mu = x0, Sigma = x0 x0^T.
  static MomentState point(const Vector& x0) {
    return {x0, SymMatrix(x0 * x0.transpose()), 0};
  }
};

/// Gradient-noise statistics of an instance.
struct GradientNoise {
  SymMatrix sigma_g;       // mean(g_i g_i^T)
  SymMatrix sigma_g_perp;  // P_perp Sigma_g P_perp
  Matrix cross;            // E[v (x) A], d^2 x d
};

inline SymMatrix gradient_covariance(const ProblemInstance& inst) {
  Matrix s = Matrix::Zero(inst.d(), inst.d());
  for (const Vector& g : inst.gradients()) s += g * g.transpose();
  return SymMatrix(s / static_cast<double>(inst.n()));
}

// ---------------------------------------------------------------------------
// Cross term E[v (x) A]
// ---------------------------------------------------------------------------

/// Closed form E[v (x) A] = -eta^2 p mean(g_i (x) H_i). Uses sum g_i = 0.
inline Matrix cross_term_closed_form(const ProblemInstance& inst, double eta, int batch) {
  const double p = p_of_batch(inst.n(), batch);
  const Index d = inst.d();
  Matrix out = Matrix::Zero(d * d, d);
  for (int i = 0; i < inst.n(); ++i)
    out += kron(inst.gradients()[static_cast<std::size_t>(i)],
                inst.hessians()[static_cast<std::size_t>(i)].matrix());
  return (-eta * eta * p / static_cast<double>(inst.n())) * out;
}

/// E[v (x) A] by enumerating every batch.
inline Matrix cross_term_enumerated(const ProblemInstance& inst, double eta, int batch,
                                    std::uint64_t cap = kEnumerationCap) {
  const int n = inst.n();
  const Index d = inst.d();
  const std::uint64_t count = binomial(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(batch));
  if (count > cap) throw InvalidArgument("cross_term_enumerated: C(n, B) exceeds the cap");
  Matrix acc = Matrix::Zero(d * d, d);
  for_each_subset(n, batch, [&](std::span<const int> b) {
    Matrix A = Matrix::Identity(d, d);
    Vector v = Vector::Zero(d);
    for (int i : b) {
      A -= (eta / batch) * inst.hessians()[static_cast<std::size_t>(i)].matrix();
      v += (eta / batch) * inst.gradients()[static_cast<std::size_t>(i)];
    }
    acc += kron(v, A);
  });
  return acc / static_cast<double>(count);
}

/// E[v (x) A], validated against exhaustive enumeration when C(n, B) <= 10^4,
/// otherwise against a 10^5-sample Monte-Carlo estimate (5 sigma per entry).
inline Matrix cross_term(const ProblemInstance& inst, double eta, int batch,
                         std::uint64_t seed = 0) {
  const Matrix closed = cross_term_closed_form(inst, eta, batch);
  const int n = inst.n();
  const Index d = inst.d();
  const std::uint64_t count = binomial(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(batch));
  if (count <= kEnumerationCap) {
    const Matrix enumerated = cross_term_enumerated(inst, eta, batch);
    const double scale = std::max(1.0, enumerated.cwiseAbs().maxCoeff());
    if ((closed - enumerated).cwiseAbs().maxCoeff() > 1e-10 * scale)
      throw NumericalFailure("cross_term: closed form disagrees with batch enumeration");
    return closed;
  }
  constexpr int kSamples = 100000;
  Rng rng(stream_seed(seed, 0xc055));
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Matrix sum = Matrix::Zero(d * d, d), sumsq = Matrix::Zero(d * d, d);
  for (int s = 0; s < kSamples; ++s) {
    Matrix A = Matrix::Identity(d, d);
    Vector v = Vector::Zero(d);
    for (int k = 0; k < batch; ++k) {
      std::uniform_int_distribution<int> pick(k, n - 1);
      std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(pick(rng))]);
      const auto i = static_cast<std::size_t>(perm[static_cast<std::size_t>(k)]);
      A -= (eta / batch) * inst.hessians()[i].matrix();
      v += (eta / batch) * inst.gradients()[i];
    }
    const Matrix x = kron(v, A);
    sum += x;
    sumsq += x.cwiseProduct(x);
  }
  const Matrix mean = sum / kSamples;
  const Matrix var = (sumsq / kSamples - mean.cwiseProduct(mean)).cwiseMax(0.0);
  const Matrix se = (var / kSamples).cwiseSqrt();
  const double floor = 1e-12 * std::max(1.0, mean.cwiseAbs().maxCoeff());
  if (((closed - mean).cwiseAbs() - 5.0 * se).maxCoeff() > floor)
    throw NumericalFailure("cross_term: closed form disagrees with Monte-Carlo estimate");
  return closed;
}

inline GradientNoise gradient_noise(const ProblemInstance& inst, double eta, int batch,
                                    double rel_tol = kDefaultRankTol) {
  GradientNoise gn;
  gn.sigma_g = gradient_covariance(inst);
  const Matrix P = null_projectors(mean_hessian(inst), rel_tol).perp.matrix();
  gn.sigma_g_perp = SymMatrix(P * gn.sigma_g.matrix() * P);
  gn.cross = cross_term(inst, eta, batch);
  return gn;
}

// ---------------------------------------------------------------------------
// Exact recursion
// ---------------------------------------------------------------------------

/// Precomputed one-step map of the exact moment recursion for fixed (eta, B).
class ExactDynamics {
 public:
  ExactDynamics(const ProblemInstance& inst, Hyperparams hp, double rel_tol = kDefaultRankTol)
      : d_(inst.d()), hp_(hp) {
    if (classify(inst, rel_tol) == MinimumClass::Invalid)
      throw InvalidArgument("exact dynamics: instance is not a regular minimum");
    if (!(hp.eta >= 0.0)) throw InvalidArgument("exact dynamics: eta must be >= 0");
    p_ = p_of_batch(inst.n(), hp.batch);
    H_ = mean_hessian(inst).matrix();
    const auto proj = null_projectors(SymMatrix(H_), rel_tol);
    par_ = proj.par.matrix();
    perp_ = proj.perp.matrix();
    q_ = q_operator(inst, hp.eta, hp.batch);
    const Matrix cross_va = cross_term(inst, hp.eta, hp.batch);
    Matrix cross_av = Matrix::Zero(d_ * d_, d_);
    for (int i = 0; i < inst.n(); ++i)
      cross_av += kron(inst.hessians()[static_cast<std::size_t>(i)].matrix(),
                       inst.gradients()[static_cast<std::size_t>(i)]);
    cross_av *= -hp.eta * hp.eta * p_ / static_cast<double>(inst.n());
    cross_sum_ = cross_va + cross_av;
    sigma_v_ = hp.eta * hp.eta * p_ * gradient_covariance(inst).matrix();
  }

  MomentState step(const MomentState& s) const {
    MomentState out;
    out.mu = s.mu - hp_.eta * (H_ * s.mu);
    const Vector next = q_(vec(s.sigma.matrix())) - cross_sum_ * s.mu + vec(sigma_v_);
    out.sigma = SymMatrix(unvec(next, d_));
    out.t = s.t + 1;
    return out;
  }

  const Matrix& hessian() const noexcept { return H_; }
  const Matrix& perp() const noexcept { return perp_; }
  const Matrix& par() const noexcept { return par_; }
  const Matrix& sigma_v() const noexcept { return sigma_v_; }
  double p() const noexcept { return p_; }
  Hyperparams hyperparams() const noexcept { return hp_; }

  Matrix sigma_perp(const MomentState& s) const { return perp_ * s.sigma.matrix() * perp_; }
  Matrix sigma_par(const MomentState& s) const { return par_ * s.sigma.matrix() * par_; }

 private:
  Index d_;
  Hyperparams hp_;
  double p_ = 0.0;
  Matrix H_, par_, perp_, cross_sum_, sigma_v_;
  LinearOperator q_;
};

inline MomentState exact_step(const ProblemInstance& inst, Hyperparams hp, const MomentState& s) {
  return ExactDynamics(inst, hp).step(s);
}

/// Closed-form E|theta_t^par - theta*^par|^2 = tr(P_par Sigma_0) + t eta^2 p mean|g_i^par|^2.
inline double null_space_variance_law(const ProblemInstance& inst, Hyperparams hp, long t,
                                      const MomentState& init, double rel_tol = kDefaultRankTol) {
  if (classify(inst, rel_tol) == MinimumClass::Invalid)
    throw InvalidArgument("null_space_variance_law: instance is not a regular minimum");
  const double p = p_of_batch(inst.n(), hp.batch);
  const Matrix par = null_projectors(mean_hessian(inst), rel_tol).par.matrix();
  double slope = 0.0;
  for (const Vector& g : inst.gradients()) slope += (par * g).squaredNorm();
  slope *= hp.eta * hp.eta * p / static_cast<double>(inst.n());
  return (par * init.sigma.matrix()).trace() + static_cast<double>(t) * slope;
}

// ---------------------------------------------------------------------------
// Asymptotic covariance
// ---------------------------------------------------------------------------

namespace detail {

/// eta p (2C - eta D)^+ vec(Sigma_g^perp). Requires 0 < eta < eta*_var.
inline Vector limit_vector(const ProblemInstance& inst, Hyperparams hp, double rel_tol) {
  if (classify(inst, rel_tol) == MinimumClass::Invalid)
    throw InvalidArgument("covariance_limit: instance is not a regular minimum");
  const double threshold = eta_star_var(inst, hp.batch);
  if (!(hp.eta > 0.0) || !(hp.eta < threshold))
    throw InvalidArgument("covariance_limit: need 0 < eta < eta*_var = " +
                          std::to_string(threshold));
  detail::require_dense(inst.d(), "covariance_limit");
  const double p = p_of_batch(inst.n(), hp.batch);
  const Matrix H = mean_hessian(inst).matrix();
  const Matrix C = 0.5 * kron_sum(H, H);
  const Matrix D = (1.0 - p) * kron(H, H) + p * detail::mean_kron_square(inst);
  const SymMatrix M(2.0 * C - hp.eta * D);
  if (!is_psd(M, rel_tol))
    throw NumericalFailure("covariance_limit: 2C - eta D is not PSD below the threshold");
  const Matrix P = null_projectors(SymMatrix(H), rel_tol).perp.matrix();
  const Matrix sg_perp = P * gradient_covariance(inst).matrix() * P;
  return hp.eta * p * (pinv_psd(M, rel_tol).matrix() * vec(sg_perp));
}

}  // namespace detail

/// lim_t Sigma_t^perp = unvec(eta p (2C - eta D)^+ vec(Sigma_g^perp)).
inline SymMatrix covariance_limit(const ProblemInstance& inst, Hyperparams hp,
                                  double rel_tol = kDefaultRankTol) {
  const Vector z = detail::limit_vector(inst, hp, rel_tol);
  SymMatrix out(unvec(z, inst.d()));
  const EigDecomp eig = sym_eig(out);
  if (eig.lambda_min() < -1e-8 * std::max(1.0, std::abs(eig.lambda_max())))
    throw NumericalFailure("covariance_limit: limit covariance is not PSD");
  return out;
}

struct AsymptoticQuantities {
  double dist_sq = 0.0;   // lim E|theta^perp - theta*^perp|^2
  double loss_gap = 0.0;  // lim E[L~(theta)] - L~(theta*)
  double grad_sq = 0.0;   // lim E|grad L~(theta)|^2
};

inline AsymptoticQuantities asymptotic_quantities(const ProblemInstance& inst, Hyperparams hp,
                                                  double rel_tol = kDefaultRankTol) {
  const Vector z = detail::limit_vector(inst, hp, rel_tol);
  const Index d = inst.d();
  const Matrix H = mean_hessian(inst).matrix();
  AsymptoticQuantities q;
  q.dist_sq = vec(Matrix::Identity(d, d)).dot(z);
  q.loss_gap = 0.5 * vec(H).dot(z);
  q.grad_sq = vec(H * H).dot(z);
  return q;
}

/// z_max^T vec(Sigma_g^perp) for the top eigenvector z_max of (P (x) P) Q.
/// The divergence direction of the orthogonal dynamics is excited only when
/// this overlap is nonzero.
inline double noise_top_overlap(const ProblemInstance& inst, Hyperparams hp,
                                double rel_tol = kDefaultRankTol) {
  const Matrix PQ = projected_q(inst, hp.eta, hp.batch, rel_tol);
  const EigDecomp eig = sym_eig(SymMatrix(PQ));
  const Matrix P = null_projectors(mean_hessian(inst), rel_tol).perp.matrix();
  return eig.vectors.col(0).dot(vec(P * gradient_covariance(inst).matrix() * P));
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct TrajectoryRow {
  long t = 0;
  double trace_sigma_perp = 0.0;
  double trace_sigma_par = 0.0;
  double mu_norm = 0.0;
  double loss_gap_estimate = 0.0;  // 1/2 tr(H Sigma)
};

inline TrajectoryRow summarize(const ExactDynamics& dyn, const MomentState& s) {
  TrajectoryRow r;
  r.t = s.t;
  r.trace_sigma_perp = dyn.sigma_perp(s).trace();
  r.trace_sigma_par = dyn.sigma_par(s).trace();
  r.mu_norm = s.mu.norm();
  r.loss_gap_estimate = 0.5 * (dyn.hessian() * s.sigma.matrix()).trace();
  return r;
}

/// Rows for t = 0, ..., steps (every `every` steps plus the last one).
inline std::vector<TrajectoryRow> exact_trajectory(const ProblemInstance& inst, Hyperparams hp,
                                                   const MomentState& init, long steps,
                                                   long every = 1) {
  const ExactDynamics dyn(inst, hp);
  std::vector<TrajectoryRow> rows;
  MomentState s = init;
  rows.push_back(summarize(dyn, s));
  for (long k = 1; k <= steps; ++k) {
    s = dyn.step(s);
    if (k % std::max(1L, every) == 0 || k == steps) rows.push_back(summarize(dyn, s));
  }
  return rows;
}

struct FixedPointResult {
  MomentState state;
  long steps = 0;
  bool converged = false;
};

/// Iterates the exact recursion until the Frobenius change of Sigma^perp falls
/// below tol or max_steps is reached.
inline FixedPointResult iterate_to_limit(const ProblemInstance& inst, Hyperparams hp,
                                         const MomentState& init, long max_steps = 10000,
                                         double tol = 1e-12) {
  const ExactDynamics dyn(inst, hp);
  FixedPointResult r{init, 0, false};
  Matrix prev = dyn.sigma_perp(init);
  for (long k = 1; k <= max_steps; ++k) {
    r.state = dyn.step(r.state);
    r.steps = k;
    Matrix cur = dyn.sigma_perp(r.state);
    if ((cur - prev).norm() < tol) {
      r.converged = true;
      break;
    }
    prev = std::move(cur);
  }
  return r;
}

}  // namespace sgdstab
