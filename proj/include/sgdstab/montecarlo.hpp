#pragma once

// Monte-Carlo simulation of the linearized SGD dynamics
//   theta_{t+1} = theta_t - (eta / B) sum_{i in b_t} (H_i (theta_t - theta*) + g_i)
// and of the mixture process ALG(p), plus bisection for an empirical threshold.
//
// Two estimators are available:
//  * Independent: R independent trajectories, plain averages with standard
//    errors. Good for moment agreement checks, but blind to mean-square
//    divergence driven by rare large paths (sample paths may converge almost
//    surely while E|theta|^2 blows up).
//  * Weighted: a population (cloning) estimator of the second-moment flow.
//    Particles carry the direction of the augmented state (theta, 1), are
//    resampled in proportion to their one-step squared-norm growth, and the
//    log of the mean growth is accumulated. Degree-2 moments are then
//    exp(L) |x_0|^2 * mean f(u) without bias, so divergence of E|theta|^2 is
//    seen directly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sgdstab/error.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/linalg.hpp"
#include "sgdstab/random.hpp"
#include "sgdstab/stability.hpp"

namespace sgdstab {

enum class Estimator { Independent, Weighted };

inline const char* to_string(Estimator e) {
  return e == Estimator::Independent ? "independent" : "weighted";
}

inline Estimator parse_estimator(const std::string& s) {
  if (s == "independent") return Estimator::Independent;
  if (s == "weighted") return Estimator::Weighted;
  throw InvalidArgument("unknown estimator '" + s + "' (expected independent|weighted)");
}

struct SimConfig {
  long steps = 1000;
  int replicates = 200;
  std::uint64_t seed = 0;
  double divergence_factor = 1e6;
  /// Initial offset theta_0 - theta*. Empty: a seeded unit direction in range(H).
  std::optional<Vector> init_offset;
  double init_scale = 1.0;
  Estimator estimator = Estimator::Weighted;
  long record_every = 1;

  void validate() const {
    if (steps < 1) throw InvalidArgument("SimConfig: steps must be >= 1");
    if (replicates < 1) throw InvalidArgument("SimConfig: replicates must be >= 1");
    if (!(divergence_factor > 1.0)) throw InvalidArgument("SimConfig: divergence_factor must be > 1");
    if (record_every < 1) throw InvalidArgument("SimConfig: record_every must be >= 1");
    if (!(init_scale >= 0.0)) throw InvalidArgument("SimConfig: init_scale must be >= 0");
  }
};

/// Per-recorded-step estimates across replicates.
struct EmpiricalMoments {
  std::vector<long> t;
  std::vector<Vector> mean;      // E[theta_t - theta*]
  std::vector<Vector> mean_se;   // standard error per coordinate
  std::vector<Vector> mean_par;  // null-space projection of mean
  std::vector<Vector> mean_perp;
  std::vector<double> sq_par;    // E|P_par (theta_t - theta*)|^2
  std::vector<double> sq_perp;   // E|P_perp (theta_t - theta*)|^2
  std::vector<double> sq_par_se;
  std::vector<double> sq_perp_se;
  std::vector<double> loss_gap;  // 1/2 E[(theta_t - theta*)^T H (theta_t - theta*)]
  std::vector<int> diverged_by;  // replicates flagged at or before each recorded step
  bool diverged = false;
  std::optional<long> divergence_step;
  int diverged_count = 0;
  int replicates = 0;
  Estimator estimator = Estimator::Independent;
  double initial_sq = 0.0;       // |theta_0 - theta*|^2

  std::size_t rows() const noexcept { return t.size(); }

  friend bool operator==(const EmpiricalMoments&, const EmpiricalMoments&) = default;
};

/// Uniform size-B subsets of {0..n-1} without replacement via a persistent
/// partial Fisher-Yates shuffle; O(B) per draw.
class BatchSampler {
 public:
  explicit BatchSampler(int n) : perm_(static_cast<std::size_t>(n)) {
    if (n < 1) throw InvalidArgument("BatchSampler: n must be >= 1");
    for (int i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
  }

  std::span<const int> draw(int batch, Rng& rng) {
    const int n = static_cast<int>(perm_.size());
    if (batch < 1 || batch > n) throw InvalidArgument("BatchSampler: batch out of range");
    for (int k = 0; k < batch; ++k) {
      std::uniform_int_distribution<int> pick(k, n - 1);
      std::swap(perm_[static_cast<std::size_t>(k)], perm_[static_cast<std::size_t>(pick(rng))]);
    }
    return {perm_.data(), static_cast<std::size_t>(batch)};
  }

 private:
  std::vector<int> perm_;
};

namespace detail {

/// One random step of the augmented linear map: theta <- A theta - s v.
/// `s` is the last coordinate of the augmented state (1 for plain paths).
class StepKernel {
 public:
  enum class Kind { Sgd, Mixture };

  StepKernel(const ProblemInstance& inst, double eta, Kind kind, int batch, double p)
      : inst_(inst), eta_(eta), kind_(kind), batch_(batch), p_(p),
        H_(mean_hessian(inst).matrix()), acc_(inst.d()) {
    gbar_ = Vector::Zero(inst.d());
    for (const Vector& g : inst.gradients()) gbar_ += g;
    gbar_ /= static_cast<double>(inst.n());
  }

  void apply(Vector& theta, double s, Rng& rng, BatchSampler& sampler) {
    if (kind_ == Kind::Mixture) {
      bool single = p_ >= 1.0;
      if (p_ > 0.0 && p_ < 1.0) single = std::bernoulli_distribution(p_)(rng);
      if (!single) {
        acc_.noalias() = H_ * theta;
        theta -= eta_ * (acc_ + s * gbar_);
        return;
      }
      batch_step(theta, s, 1, rng, sampler);
      return;
    }
    batch_step(theta, s, batch_, rng, sampler);
  }

 private:
  void batch_step(Vector& theta, double s, int b, Rng& rng, BatchSampler& sampler) {
    acc_.setZero();
    for (int i : sampler.draw(b, rng)) {
      const auto k = static_cast<std::size_t>(i);
      acc_.noalias() += inst_.hessians()[k].matrix() * theta;
      acc_ += s * inst_.gradients()[k];
    }
    theta -= (eta_ / b) * acc_;
  }

  const ProblemInstance& inst_;
  double eta_;
  Kind kind_;
  int batch_;
  double p_;
  Matrix H_;
  Vector gbar_;
  Vector acc_;
};

struct Projections {
  Matrix par, perp, H;
};

inline Vector default_init(const ProblemInstance& inst, const SimConfig& cfg, const Projections& pr) {
  if (cfg.init_offset) {
    if (cfg.init_offset->size() != inst.d())
      throw InvalidArgument("SimConfig: init_offset has the wrong dimension");
    return *cfg.init_offset;
  }
  Rng rng(stream_seed(cfg.seed, 0x1417));
  const EigDecomp eig = sym_eig(SymMatrix(pr.H));
  Vector v;
  if (eig.lambda_max() <= 0.0) {
    v = random_unit_vector(inst.d(), rng);
  } else {
    for (int tries = 0; tries < 64; ++tries) {
      v = pr.perp * random_unit_vector(inst.d(), rng);
      if (v.norm() > 1e-8) break;
    }
    v /= v.norm();
  }
  return cfg.init_scale * v;
}

/// Running mean and centered sum of squares (Welford); blocks combine with
/// Chan's update, so identical samples give exactly zero spread.
template <class T>
struct Welford {
  T mean, m2;

  void add(const T& x, int n_after) {
    const T delta = x - mean;
    mean += delta / static_cast<double>(n_after);
    m2 += prod(delta, x - mean);
  }

  void merge(const Welford& o, int na, int nb) {
    if (nb == 0) return;
    const double n = static_cast<double>(na + nb);
    const T delta = o.mean - mean;
    mean += delta * (static_cast<double>(nb) / n);
    m2 += o.m2 + prod(delta, delta) * (static_cast<double>(na) * nb / n);
  }

  /// Standard error of the mean over r samples.
  T se(int r) const {
    if (r < 2) return m2 * 0.0;
    return sqrt_of(m2 / (static_cast<double>(r - 1) * r));
  }

 private:
  static double prod(double a, double b) { return a * b; }
  static Vector prod(const Vector& a, const Vector& b) { return a.cwiseProduct(b); }
  static double sqrt_of(double v) { return std::sqrt(std::max(0.0, v)); }
  static Vector sqrt_of(const Vector& v) { return v.cwiseMax(0.0).cwiseSqrt(); }
};

/// Per-row accumulator for one block of replicates; blocks are merged in index order.
struct Accum {
  int count = 0;  // samples per row (all rows see every replicate)
  std::vector<Welford<Vector>> x;
  std::vector<Welford<double>> par, perp;
  std::vector<double> loss;
  std::vector<int> flagged;

  Accum(std::size_t rows, Index d)
      : x(rows, {Vector::Zero(d), Vector::Zero(d)}), par(rows, {0.0, 0.0}), perp(rows, {0.0, 0.0}),
        loss(rows, 0.0), flagged(rows, 0) {}

  /// Rows are filled in order 0..rows-1 for each replicate; call finish_replicate after.
  void add(std::size_t row, const Vector& v, const Projections& pr) {
    const int n = count + 1;
    x[row].add(v, n);
    par[row].add((pr.par * v).squaredNorm(), n);
    perp[row].add((pr.perp * v).squaredNorm(), n);
    loss[row] += 0.5 * v.dot(pr.H * v);
  }

  void finish_replicate() { ++count; }

  void merge(const Accum& o) {
    for (std::size_t r = 0; r < x.size(); ++r) {
      x[r].merge(o.x[r], count, o.count);
      par[r].merge(o.par[r], count, o.count);
      perp[r].merge(o.perp[r], count, o.count);
      loss[r] += o.loss[r];
      flagged[r] += o.flagged[r];
    }
    count += o.count;
  }
};

inline std::vector<long> record_steps(long steps, long every) {
  std::vector<long> ts;
  for (long k = 0; k <= steps; k += every) ts.push_back(k);
  if (ts.back() != steps) ts.push_back(steps);
  return ts;
}

inline EmpiricalMoments run_independent(const ProblemInstance& inst, StepKernel& kernel,
                                        const SimConfig& cfg, const Projections& pr,
                                        const Vector& x0) {
  const Index d = inst.d();
  const std::vector<long> ts = record_steps(cfg.steps, cfg.record_every);
  const double threshold = cfg.divergence_factor * (1.0 + x0.squaredNorm());
  constexpr int kBlock = 64;

  Accum total(ts.size(), d);
  EmpiricalMoments out;
  out.estimator = Estimator::Independent;
  out.replicates = cfg.replicates;
  out.initial_sq = x0.squaredNorm();
  Vector theta(d);

  for (int start = 0; start < cfg.replicates; start += kBlock) {
    Accum block(ts.size(), d);
    const int stop = std::min(cfg.replicates, start + kBlock);
    for (int r = start; r < stop; ++r) {
      Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(r)));
      BatchSampler sampler(inst.n());
      theta = x0;
      bool frozen = false;
      std::size_t row = 0;
      for (long k = 0; k <= cfg.steps; ++k) {
        if (k > 0 && !frozen) {
          kernel.apply(theta, 1.0, rng, sampler);
          const double sq = (pr.perp * theta).squaredNorm();
          if (!(sq <= threshold)) {
            // Diverged paths saturate: they keep their last value from here on.
            frozen = true;
            ++out.diverged_count;
            if (!out.divergence_step || k < *out.divergence_step) out.divergence_step = k;
          }
        }
        if (row < ts.size() && ts[row] == k) {
          block.flagged[row] += frozen ? 1 : 0;
          block.add(row++, theta, pr);
        }
      }
      block.finish_replicate();
    }
    total.merge(block);
  }

  const int R = cfg.replicates;
  for (std::size_t row = 0; row < ts.size(); ++row) {
    out.t.push_back(ts[row]);
    const Vector& m = total.x[row].mean;
    out.mean.push_back(m);
    out.mean_se.push_back(total.x[row].se(R));
    out.mean_par.push_back(pr.par * m);
    out.mean_perp.push_back(pr.perp * m);
    out.sq_par.push_back(total.par[row].mean);
    out.sq_perp.push_back(total.perp[row].mean);
    out.sq_par_se.push_back(total.par[row].se(R));
    out.sq_perp_se.push_back(total.perp[row].se(R));
    out.loss_gap.push_back(total.loss[row] / R);
    out.diverged_by.push_back(total.flagged[row]);
  }
  out.diverged = out.diverged_count > 0;
  return out;
}

inline EmpiricalMoments run_weighted(const ProblemInstance& inst, StepKernel& kernel,
                                     const SimConfig& cfg, const Projections& pr,
                                     const Vector& x0) {
  const Index d = inst.d();
  const int R = cfg.replicates;
  const std::vector<long> ts = record_steps(cfg.steps, cfg.record_every);
  const double threshold = cfg.divergence_factor * (1.0 + x0.squaredNorm());
  const double norm0_sq = x0.squaredNorm() + 1.0;

  // Particle state: direction of (theta, s) with |(theta, s)| = 1.
  std::vector<Vector> theta(static_cast<std::size_t>(R));
  std::vector<double> s(static_cast<std::size_t>(R));
  std::vector<Rng> rngs;
  std::vector<BatchSampler> samplers;
  rngs.reserve(static_cast<std::size_t>(R));
  samplers.reserve(static_cast<std::size_t>(R));
  const double n0 = std::sqrt(norm0_sq);
  for (int r = 0; r < R; ++r) {
    theta[static_cast<std::size_t>(r)] = x0 / n0;
    s[static_cast<std::size_t>(r)] = 1.0 / n0;
    rngs.emplace_back(stream_seed(cfg.seed, static_cast<std::uint64_t>(r)));
    samplers.emplace_back(inst.n());
  }
  Rng resample_rng(stream_seed(cfg.seed, 0x7e5a3b1eULL));
  std::vector<double> w(static_cast<std::size_t>(R));
  std::vector<Vector> next_theta(static_cast<std::size_t>(R));
  std::vector<double> next_s(static_cast<std::size_t>(R));

  EmpiricalMoments out;
  out.estimator = Estimator::Weighted;
  out.replicates = R;
  out.initial_sq = x0.squaredNorm();

  double log_scale = std::log(norm0_sq);  // E|x_t|^2 = exp(log_scale) * mean f(u)
  bool extinct = false;

  auto record = [&](long k) {
    // Weighted population averages of degree-2 functions of the particles.
    const double scale = extinct ? 0.0 : std::exp(log_scale);
    double wsum = 0.0;
    for (double x : w) wsum += x;
    // Two passes: weighted means, then centered spreads (no cancellation when
    // the particles coincide).
    Vector m = Vector::Zero(d);
    double a = 0.0, b = 0.0, l = 0.0;
    for (int r = 0; r < R; ++r) {
      const auto i = static_cast<std::size_t>(r);
      const double wi = w[i] / wsum;
      m += wi * (theta[i] * s[i]);
      a += wi * (pr.par * theta[i]).squaredNorm();
      b += wi * (pr.perp * theta[i]).squaredNorm();
      l += wi * 0.5 * theta[i].dot(pr.H * theta[i]);
    }
    Vector vm = Vector::Zero(d);
    double va = 0.0, vb = 0.0;
    for (int r = 0; r < R; ++r) {
      const auto i = static_cast<std::size_t>(r);
      const double wi = w[i] / wsum;
      const Vector dx = theta[i] * s[i] - m;
      const double da = (pr.par * theta[i]).squaredNorm() - a;
      const double db = (pr.perp * theta[i]).squaredNorm() - b;
      vm += wi * dx.cwiseProduct(dx);
      va += wi * da * da;
      vb += wi * db * db;
    }
    auto se = [&](double var) { return R < 2 ? 0.0 : scale * std::sqrt(var / (R - 1)); };
    Vector mse(d);
    for (Index j = 0; j < d; ++j) mse(j) = se(vm(j));
    out.t.push_back(k);
    out.mean.push_back(scale * m);
    out.mean_se.push_back(mse);
    out.mean_par.push_back(scale * (pr.par * m));
    out.mean_perp.push_back(scale * (pr.perp * m));
    out.sq_par.push_back(scale * a);
    out.sq_perp.push_back(scale * b);
    out.sq_par_se.push_back(se(va));
    out.sq_perp_se.push_back(se(vb));
    out.loss_gap.push_back(scale * l);
    out.diverged_by.push_back(0);
    return scale * b;
  };

  std::fill(w.begin(), w.end(), 1.0);
  std::size_t row = 0;
  if (ts[row] == 0) {
    record(0);
    ++row;
  }
  for (long k = 1; k <= cfg.steps; ++k) {
    if (!extinct) {
      double wsum = 0.0;
      for (int r = 0; r < R; ++r) {
        const auto i = static_cast<std::size_t>(r);
        next_theta[i] = theta[i];
        kernel.apply(next_theta[i], s[i], rngs[i], samplers[i]);
        next_s[i] = s[i];
        w[i] = next_theta[i].squaredNorm() + next_s[i] * next_s[i];
        wsum += w[i];
      }
      if (!(wsum > 0.0)) {
        extinct = true;
      } else {
        log_scale += std::log(wsum / R);
        for (int r = 0; r < R; ++r) {
          const auto i = static_cast<std::size_t>(r);
          const double nrm = std::sqrt(w[i]);
          if (nrm > 0.0) {
            next_theta[i] /= nrm;
            next_s[i] /= nrm;
          }
        }
        theta.swap(next_theta);
        s.swap(next_s);
      }
    }

    const bool at_record = row < ts.size() && ts[row] == k;
    double perp_sq;
    if (at_record) {
      perp_sq = record(k);
      ++row;
    } else {
      double wsum = 0.0, b = 0.0;
      for (int r = 0; r < R; ++r) {
        const auto i = static_cast<std::size_t>(r);
        wsum += w[i];
        b += w[i] * (pr.perp * theta[static_cast<std::size_t>(r)]).squaredNorm();
      }
      perp_sq = extinct ? 0.0 : std::exp(log_scale) * b / wsum;
    }
    if (!(perp_sq <= threshold)) {
      out.diverged = true;
      out.divergence_step = k;
      out.diverged_count = R;
      if (!at_record) record(k);
      out.diverged_by.back() = R;
      return out;
    }

    if (!extinct) {
      // Systematic resampling proportional to w; particles restart with equal weight.
      double wsum = 0.0;
      for (double x : w) wsum += x;
      const double u0 = std::uniform_real_distribution<double>(0.0, 1.0)(resample_rng);
      double cum = w[0] / wsum;
      int j = 0;
      for (int r = 0; r < R; ++r) {
        const double target = (r + u0) / R;
        while (cum < target && j < R - 1) cum += w[static_cast<std::size_t>(++j)] / wsum;
        next_theta[static_cast<std::size_t>(r)] = theta[static_cast<std::size_t>(j)];
        next_s[static_cast<std::size_t>(r)] = s[static_cast<std::size_t>(j)];
      }
      theta.swap(next_theta);
      s.swap(next_s);
      std::fill(w.begin(), w.end(), 1.0);
    }
  }
  return out;
}

inline Projections projections(const ProblemInstance& inst) {
  const SymMatrix H = mean_hessian(inst);
  const NullProjectors np = null_projectors(H);
  return {np.par.matrix(), np.perp.matrix(), H.matrix()};
}

inline EmpiricalMoments run(const ProblemInstance& inst, StepKernel& kernel, const SimConfig& cfg) {
  const Projections pr = projections(inst);
  const Vector x0 = default_init(inst, cfg, pr);
  return cfg.estimator == Estimator::Independent ? run_independent(inst, kernel, cfg, pr, x0)
                                                 : run_weighted(inst, kernel, cfg, pr, x0);
}

}  // namespace detail

/// Default initial offset used by the simulators for this configuration.
inline Vector initial_offset(const ProblemInstance& inst, const SimConfig& cfg) {
  return detail::default_init(inst, cfg, detail::projections(inst));
}

inline EmpiricalMoments simulate_sgd(const ProblemInstance& inst, Hyperparams hp, const SimConfig& cfg) {
  cfg.validate();
  if (classify(inst) == MinimumClass::Invalid)
    throw InvalidArgument("simulate_sgd: instance is not a regular minimum");
  if (!(hp.eta >= 0.0)) throw InvalidArgument("simulate_sgd: eta must be >= 0");
  const double p = p_of_batch(inst.n(), hp.batch);
  detail::StepKernel kernel(inst, hp.eta, detail::StepKernel::Kind::Sgd, hp.batch, p);
  return detail::run(inst, kernel, cfg);
}

inline EmpiricalMoments simulate_mixture(const ProblemInstance& inst, double eta, double p,
                                         const SimConfig& cfg) {
  cfg.validate();
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("simulate_mixture: p must lie in [0, 1]");
  if (classify(inst) == MinimumClass::Invalid)
    throw InvalidArgument("simulate_mixture: instance is not a regular minimum");
  if (!(eta >= 0.0)) throw InvalidArgument("simulate_mixture: eta must be >= 0");
  detail::StepKernel kernel(inst, eta, detail::StepKernel::Kind::Mixture, 1, p);
  return detail::run(inst, kernel, cfg);
}

/// E[A (x) A] of the mixture process: (1 - p) A (x) A + p mean(A_i (x) A_i).
inline Matrix mixture_Q(const ProblemInstance& inst, double eta, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("mixture_Q: p must lie in [0, 1]");
  detail::require_dense(inst.d(), "mixture_Q");
  const Index d = inst.d();
  const Matrix I = Matrix::Identity(d, d);
  const Matrix A = I - eta * mean_hessian(inst).matrix();
  Matrix single = Matrix::Zero(d * d, d * d);
  for (const SymMatrix& h : inst.hessians()) {
    const Matrix Ai = I - eta * h.matrix();
    single += kron(Ai, Ai);
  }
  single /= static_cast<double>(inst.n());
  return (1.0 - p) * kron(A, A) + p * single;
}

/// Bisection on the divergence flag of the orthogonal second moment.
inline double empirical_threshold(const ProblemInstance& inst, int batch, const SimConfig& cfg,
                                  double eta_lo, double eta_hi, double bisect_tol) {
  if (!(eta_lo >= 0.0 && eta_hi > eta_lo)) throw InvalidArgument("empirical_threshold: need 0 <= eta_lo < eta_hi");
  if (!(bisect_tol > 0.0)) throw InvalidArgument("empirical_threshold: bisect_tol must be > 0");
  auto diverges = [&](double eta) { return simulate_sgd(inst, {eta, batch}, cfg).diverged; };
  const bool lo = diverges(eta_lo), hi = diverges(eta_hi);
  if (lo || !hi)
    throw InvalidArgument("empirical_threshold: invalid bracket (eta_lo must be stable and eta_hi unstable)");
  while (eta_hi - eta_lo >= bisect_tol) {
    const double mid = 0.5 * (eta_lo + eta_hi);
    (diverges(mid) ? eta_hi : eta_lo) = mid;
  }
  return 0.5 * (eta_lo + eta_hi);
}

}  // namespace sgdstab
