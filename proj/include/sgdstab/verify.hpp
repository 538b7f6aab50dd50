#pragma once

// Randomized property suites used by `sgdstab verify` and the test binaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sgdstab/instance.hpp"
#include "sgdstab/kron_certify.hpp"
#include "sgdstab/moments.hpp"
#include "sgdstab/montecarlo.hpp"
#include "sgdstab/stability.hpp"

namespace sgdstab::verify {

enum class Suite { Kron, Thresholds, Moments, Mixture, All };

inline Suite parse_suite(const std::string& s) {
  if (s == "kron") return Suite::Kron;
  if (s == "thresholds") return Suite::Thresholds;
  if (s == "moments") return Suite::Moments;
  if (s == "mixture") return Suite::Mixture;
  if (s == "all") return Suite::All;
  throw InvalidArgument("unknown suite '" + s + "' (expected kron|thresholds|moments|mixture|all)");
}

/// Deliberate defects for exercising the harness itself.
enum class Fault { None, QSign };

inline Fault parse_fault(const std::string& s) {
  if (s.empty() || s == "none") return Fault::None;
  if (s == "q-sign") return Fault::QSign;
  throw InvalidArgument("unknown fault '" + s + "'");
}

struct Options {
  std::uint64_t seed = 1;
  int trials = 20;
  Fault fault = Fault::None;
};

struct PropertyResult {
  std::string name;
  int passed = 0;
  int trials = 0;
  std::string first_failure;

  bool ok() const noexcept { return passed == trials; }
};

struct Report {
  std::vector<PropertyResult> properties;

  bool ok() const {
    return std::all_of(properties.begin(), properties.end(), [](const auto& p) { return p.ok(); });
  }

  void print(std::ostream& os) const {
    for (const auto& p : properties) {
      os << (p.ok() ? "PASS " : "FAIL ") << p.name << ": " << p.passed << "/" << p.trials;
      if (!p.ok()) os << "  (" << p.first_failure << ")";
      os << '\n';
    }
  }
};

namespace detail {

/// Trial body: returns an empty string on success or a failure description.
using Trial = std::function<std::string(std::uint64_t seed, int trial)>;

inline PropertyResult run_property(const std::string& name, int trials, std::uint64_t seed,
                                   const Trial& body) {
  PropertyResult r;
  r.name = name;
  r.trials = trials;
  for (int k = 0; k < trials; ++k) {
    std::string msg;
    try {
      msg = body(stream_seed(seed, static_cast<std::uint64_t>(k)), k);
    } catch (const std::exception& e) {
      msg = std::string("exception: ") + e.what();
    }
    if (msg.empty()) {
      ++r.passed;
    } else if (r.first_failure.empty()) {
      r.first_failure = "trial " + std::to_string(k) + ": " + msg;
    }
  }
  return r;
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

struct RandomInstance {
  ProblemInstance inst;
  int batch;
};

/// Random small instance; `regular` adds zero-mean gradients.
inline RandomInstance random_instance(std::uint64_t seed, int max_d, int max_n, bool regular,
                                      bool full_rank_mean = false) {
  Rng rng(seed);
  const int d = uniform_int(rng, 1, max_d);
  const int n = uniform_int(rng, 2, max_n);
  int rank = uniform_int(rng, 1, d);
  if (full_rank_mean) rank = std::max(rank, (d + n - 1) / n);
  const std::uint64_t s = rng();
  ProblemInstance inst = regular ? gen_regular(d, n, rank, 1.0, false, s) : gen_interpolating(d, n, rank, s);
  return {std::move(inst), uniform_int(rng, 1, n)};
}

inline std::string fail_if(bool bad, const std::string& what) { return bad ? what : std::string(); }

inline double rel(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::abs(b)); }

}  // namespace detail

inline std::vector<PropertyResult> kron_suite(const Options& o) {
  using detail::run_property;
  std::vector<PropertyResult> out;
  out.push_back(run_property("kron.certify_random_families", o.trials, o.seed ^ 0x11, [](std::uint64_t s, int) {
    Rng rng(s);
    KronFamily fam;
    fam.dim = detail::uniform_int(rng, 2, 4);
    const int m = detail::uniform_int(rng, 1, 5);
    for (int i = 0; i < m; ++i) {
      const Matrix g = standard_normal(fam.dim, fam.dim, rng);
      fam.members.emplace_back(g + g.transpose());
      fam.weights.push_back(std::uniform_real_distribution<double>(0.1, 1.0)(rng));
    }
    const CertifyReport rep = certify(fam);
    if (std::abs(rep.rho - rep.lambda_max) > 1e-8 * std::max(1.0, rep.rho))
      return std::string("rho(Q) != lambda_max(Q)");
    if (rep.min_eig_of_top < -1e-7) return std::string("top eigenvector matrix not PSD");
    for (double defect : rep.eigvec_symmetry_defects)
      if (defect > 1e-6) return std::string("eigenvector neither symmetric nor skew");
    return std::string();
  }));
  out.push_back(run_property("kron.certify_transition_families", o.trials, o.seed ^ 0x12, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 5, false);
    const double eta = 1.5 * eta_star_mean(ri.inst);
    const CertifyReport rep = certify(transition_family(ri.inst, eta, ri.batch));
    if (std::abs(rep.rho - rep.lambda_max) > 1e-8 * std::max(1.0, rep.rho))
      return std::string("rho(Q) != lambda_max(Q)");
    return detail::fail_if(rep.min_eig_of_top < -1e-7, "top eigenvector matrix not PSD");
  }));
  return out;
}

inline std::vector<PropertyResult> thresholds_suite(const Options& o) {
  using detail::run_property;
  std::vector<PropertyResult> out;
  const Fault fault = o.fault;
  out.push_back(run_property("thresholds.q_oracle_equality", o.trials, o.seed ^ 0x21, [fault](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 6, false);
    const SpectralReport rep = build_CDE(ri.inst, ri.batch);
    const Index d = ri.inst.d();
    const Matrix I = Matrix::Identity(d * d, d * d);
    const double sign = fault == Fault::QSign ? -1.0 : 1.0;
    for (double scale : {0.1, 0.5, 1.0, 1.5, 3.0}) {
      const double eta = scale / lambda_max(rep.H);
      const Matrix oracle = brute_force_Q(ri.inst, eta, ri.batch);
      const QForms q = q_forms(ri.inst, eta, ri.batch);
      const Matrix identity = I - sign * 2.0 * eta * rep.C + eta * eta * rep.D;
      const double tol = 1e-10 * std::max(1.0, oracle.cwiseAbs().maxCoeff());
      for (const Matrix* m : {&q.kron_expansion, &q.mixture, &identity})
        if ((*m - oracle).cwiseAbs().maxCoeff() > tol) return std::string("Q form differs from batch enumeration");
    }
    return std::string();
  }));
  out.push_back(run_property("thresholds.gd_recovery", o.trials, o.seed ^ 0x22, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 6, 10, false);
    const double a = eta_star_var(ri.inst, ri.inst.n()), b = 2.0 / lambda_max(mean_hessian(ri.inst));
    return detail::fail_if(detail::rel(a, b) > 1e-9, "eta*_var(B=n) != 2/lambda_max(H)");
  }));
  out.push_back(run_property("thresholds.monotone_in_batch", o.trials, o.seed ^ 0x23, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 8, false);
    double prev = 0.0;
    for (int b = 1; b <= ri.inst.n(); ++b) {
      const double cur = eta_star_var(ri.inst, b);
      if (cur < prev * (1.0 - 1e-9)) return std::string("eta*_var decreased at B=") + std::to_string(b);
      prev = cur;
    }
    return std::string();
  }));
  out.push_back(run_property("thresholds.spectrum_crossing", o.trials, o.seed ^ 0x24, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 6, false, true);
    const double th = eta_star_var(ri.inst, ri.batch);
    auto top = [&](double eta) { return lambda_max(SymMatrix(build_Q(ri.inst, eta, ri.batch))); };
    if (std::abs(top(th) - 1.0) > 1e-7) return std::string("lambda_max(Q(eta*)) != 1");
    if (!(top(0.99 * th) < 1.0)) return std::string("unstable below threshold");
    return detail::fail_if(!(top(1.01 * th) > 1.0), "stable above threshold");
  }));
  out.push_back(run_property("thresholds.bound_chain", o.trials, o.seed ^ 0x25, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 6, false);
    const double gs = generalized_sharpness(ri.inst, ri.batch);
    const double r1 = optimized_rank_one_bound(ri.inst, ri.batch).value;
    const double v = vmax_sharpness_bound(ri.inst, ri.batch);
    const double h = lambda_max(mean_hessian(ri.inst));
    const double slack = 1e-9 * gs;
    if (gs < r1 - slack) return std::string("lambda_max(C^+D) < rank-one value");
    if (r1 < v - slack) return std::string("rank-one value < v_max value");
    return detail::fail_if(v < h - slack, "v_max value < lambda_max(H)");
  }));
  return out;
}

inline std::vector<PropertyResult> moments_suite(const Options& o) {
  using detail::run_property;
  std::vector<PropertyResult> out;
  out.push_back(run_property("moments.fixed_point", o.trials, o.seed ^ 0x31, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 3, 5, true);
    const Hyperparams hp{0.5 * eta_star_var(ri.inst, ri.batch), ri.batch};
    const SymMatrix lim = covariance_limit(ri.inst, hp);
    const FixedPointResult fp = iterate_to_limit(ri.inst, hp, MomentState::zero(ri.inst.d()));
    const ExactDynamics dyn(ri.inst, hp);
    return detail::fail_if((dyn.sigma_perp(fp.state) - lim.matrix()).norm() > 1e-6,
                           "exact recursion does not reach the covariance limit");
  }));
  out.push_back(run_property("moments.trace_identities", o.trials, o.seed ^ 0x32, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 5, true);
    const Hyperparams hp{0.7 * eta_star_var(ri.inst, ri.batch), ri.batch};
    const Matrix lim = covariance_limit(ri.inst, hp).matrix();
    const Matrix H = mean_hessian(ri.inst).matrix();
    const AsymptoticQuantities q = asymptotic_quantities(ri.inst, hp);
    const double tol = 1e-9 * std::max(1.0, lim.trace());
    if (std::abs(q.dist_sq - lim.trace()) > tol) return std::string("dist_sq != tr(Sigma)");
    if (std::abs(q.loss_gap - 0.5 * (H * lim).trace()) > tol) return std::string("loss_gap != tr(H Sigma)/2");
    return detail::fail_if(std::abs(q.grad_sq - (H * H * lim).trace()) > tol, "grad_sq != tr(H^2 Sigma)");
  }));
  out.push_back(run_property("moments.null_space_law", o.trials, o.seed ^ 0x33, [](std::uint64_t s, int) {
    Rng rng(s);
    const int d = detail::uniform_int(rng, 2, 4), n = detail::uniform_int(rng, 2, 5);
    const ProblemInstance inst = gen_regular(d, n, 1, 1.0, true, rng());
    const int b = detail::uniform_int(rng, 1, n);
    const Hyperparams hp{0.5 * eta_star_var(inst, b), b};
    const ExactDynamics dyn(inst, hp);
    MomentState st = MomentState::point(random_unit_vector(d, rng));
    const MomentState init = st;
    for (long t = 1; t <= 50; ++t) {
      st = dyn.step(st);
      const double law = null_space_variance_law(inst, hp, t, init);
      if (std::abs(dyn.sigma_par(st).trace() - law) > 1e-9 * std::max(1.0, law))
        return std::string("null-space trace deviates from the linear law");
    }
    return std::string();
  }));
  out.push_back(run_property("moments.noise_injection", o.trials, o.seed ^ 0x34, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 6, true);
    const double eta = 0.3 / lambda_max(mean_hessian(ri.inst));
    const ExactDynamics dyn(ri.inst, {eta, ri.batch});
    const MomentState one = dyn.step(MomentState::zero(ri.inst.d()));
    // Direct enumeration of E[v v^T].
    Matrix ev = Matrix::Zero(ri.inst.d(), ri.inst.d());
    std::uint64_t count = 0;
    for_each_subset(ri.inst.n(), ri.batch, [&](std::span<const int> b) {
      Vector v = Vector::Zero(ri.inst.d());
      for (int i : b) v += (eta / ri.batch) * ri.inst.gradients()[static_cast<std::size_t>(i)];
      ev += v * v.transpose();
      ++count;
    });
    ev /= static_cast<double>(count);
    return detail::fail_if((one.sigma.matrix() - ev).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, ev.norm()),
                           "one-step covariance injection != E[v v^T]");
  }));
  return out;
}

inline std::vector<PropertyResult> mixture_suite(const Options& o) {
  using detail::run_property;
  std::vector<PropertyResult> out;
  out.push_back(run_property("mixture.q_equivalence", o.trials, o.seed ^ 0x41, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 4, 6, false);
    const double eta = 0.7 / lambda_max(mean_hessian(ri.inst));
    const Matrix a = mixture_Q(ri.inst, eta, p_of_batch(ri.inst.n(), ri.batch));
    const Matrix b = brute_force_Q(ri.inst, eta, ri.batch);
    return detail::fail_if((a - b).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, b.cwiseAbs().maxCoeff()),
                           "mixture E[A(x)A] != batch enumeration");
  }));
  out.push_back(run_property("mixture.single_sample_paths", o.trials, o.seed ^ 0x42, [](std::uint64_t s, int) {
    const auto ri = detail::random_instance(s, 3, 5, true);
    SimConfig cfg;
    cfg.steps = 50;
    cfg.replicates = 8;
    cfg.seed = s;
    cfg.estimator = Estimator::Independent;
    const double eta = 0.5 / lambda_max(mean_hessian(ri.inst));
    return detail::fail_if(!(simulate_mixture(ri.inst, eta, 1.0, cfg) == simulate_sgd(ri.inst, {eta, 1}, cfg)),
                           "p=1 mixture paths differ from SGD B=1");
  }));
  const int mc_trials = std::min(o.trials, 3);
  out.push_back(run_property("mixture.stability_classification", mc_trials, o.seed ^ 0x43, [](std::uint64_t s, int) {
    Rng rng(s);
    const int n = detail::uniform_int(rng, 3, 5);
    const ProblemInstance inst = gen_interpolating(2, n, 1, rng());
    const int b = detail::uniform_int(rng, 1, n - 1);
    const double th = eta_star_var(inst, b);
    SimConfig cfg;
    cfg.steps = 3000;
    cfg.replicates = 200;
    cfg.seed = s;
    const double p = p_of_batch(n, b);
    for (double f : {0.9, 1.1}) {
      const bool sgd = simulate_sgd(inst, {f * th, b}, cfg).diverged;
      const bool mix = simulate_mixture(inst, f * th, p, cfg).diverged;
      if (sgd != mix) return std::string("SGD and mixture disagree at ") + std::to_string(f) + " eta*";
      if (sgd != (f > 1.0)) return std::string("classification wrong at ") + std::to_string(f) + " eta*";
    }
    return std::string();
  }));
  return out;
}

inline Report run(Suite suite, const Options& o) {
  Report r;
  auto add = [&](std::vector<PropertyResult> v) {
    for (auto& p : v) r.properties.push_back(std::move(p));
  };
  if (suite == Suite::Kron || suite == Suite::All) add(kron_suite(o));
  if (suite == Suite::Thresholds || suite == Suite::All) add(thresholds_suite(o));
  if (suite == Suite::Moments || suite == Suite::All) add(moments_suite(o));
  if (suite == Suite::Mixture || suite == Suite::All) add(mixture_suite(o));
  return r;
}

}  // namespace sgdstab::verify
