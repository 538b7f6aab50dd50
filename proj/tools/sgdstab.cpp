// sgdstab: generate instances, analyze stability thresholds, sweep, simulate, verify.
//
// Exit codes: 0 success, 1 usage, 2 input/validation, 3 verification failure,
// 4 numerical failure.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sgdstab/csv.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/moments.hpp"
#include "sgdstab/montecarlo.hpp"
#include "sgdstab/stability.hpp"
#include "sgdstab/verify.hpp"

namespace {

using namespace sgdstab;

constexpr int kExitUsage = 1;
constexpr int kExitInput = 2;
constexpr int kExitVerify = 3;
constexpr int kExitNumerical = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Writes to `path`, or stdout when path is empty or "-".
template <class F>
void with_output(const std::string& path, F&& f) {
  if (path.empty() || path == "-") {
    f(std::cout);
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path + " for writing");
  f(os);
  if (!os) throw ValidationError("failed writing " + path);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string kind = "interpolating";
  int d = 2, n = 4, rank = 1;
  std::uint64_t seed = 0;
  double grad_scale = 1.0;
  bool null_grad = false, normalize = false;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  ProblemInstance inst = [&] {
    GenOptions opts;
    opts.normalize = a.normalize;
    if (a.kind == "interpolating") return gen_interpolating(a.d, a.n, a.rank, a.seed, opts);
    if (a.kind == "regular") return gen_regular(a.d, a.n, a.rank, a.grad_scale, a.null_grad, a.seed, opts);
    if (a.kind == "s1") return fixtures::s1();
    if (a.kind == "s2") return fixtures::s2();
    if (a.kind == "s3") return fixtures::s3();
    throw UsageError("unknown --kind '" + a.kind + "'");
  }();
  save(inst, a.out);
  std::cout << "wrote " << a.out << " (d=" << inst.d() << ", n=" << inst.n()
            << "): " << to_string(classify(inst)) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string file;
  int batch = 1;
  std::vector<double> etas;
  std::string csv;
  std::uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const ProblemInstance inst = load(a.file);
  const MinimumClass cls = classify(inst);
  if (cls == MinimumClass::Invalid) throw ValidationError("instance is not a regular minimum");
  VerdictOptions vo;
  vo.rank_one.seed = a.seed;
  const StabilityVerdict v = verdict(inst, a.batch, a.etas, vo);

  auto line = [](const char* k, double x) { std::cout << k << " = " << csv::real(x) << '\n'; };
  std::cout << "instance: " << inst.label() << " (d=" << inst.d() << ", n=" << inst.n() << ", "
            << to_string(cls) << ")\n";
  std::cout << "batch B = " << v.batch << '\n';
  line("p", v.p);
  line("lambda_max(H)", v.lambda_max_H);
  line("lambda_max(C^+D)", v.generalized_sharpness);
  line("eta*_mean", v.eta_star_mean);
  line("eta*_var", v.eta_star_var);
  line("bound_vmax", v.bound_vmax);
  line("bound_trace", v.bound_trace);
  line("bound_rank_one", v.bound_rank_one);
  if (a.batch == inst.n())
    std::cout << "GD regime: eta*_var == eta*_mean ("
              << (std::abs(v.eta_star_var - v.eta_star_mean) <= 1e-9 * v.eta_star_mean ? "holds" : "VIOLATED")
              << ")\n";
  if (cls == MinimumClass::Regular && inst.d() <= kDenseCap && std::isfinite(v.eta_star_var)) {
    const double overlap = noise_top_overlap(inst, {0.5 * v.eta_star_var, a.batch});
    std::cout << "noise overlap z_max^T vec(Sigma_g^perp) at eta*_var/2 = " << csv::real(overlap)
              << (std::abs(overlap) < 1e-12 ? "  (zero: divergence direction not excited)" : "") << '\n';
  }
  for (const auto& e : v.etas)
    std::cout << "eta " << csv::real(e.eta) << ": mean " << (e.mean_stable ? "stable" : "unstable")
              << ", mean-square " << (e.var_stable ? "stable" : "unstable") << '\n';

  if (!a.csv.empty()) {
    with_output(a.csv, [&](std::ostream& os) {
      os << "eta,mean_stable,var_stable,perp_q_lambda_max\n";
      for (const auto& e : v.etas)
        os << csv::real(e.eta) << ',' << int(e.mean_stable) << ',' << int(e.var_stable) << ','
           << csv::real(e.perp_q_lambda_max) << '\n';
    });
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string file;
  std::vector<int> batches;
  std::vector<double> etas;
  double eta_min = 0.0, eta_max = 0.0;
  int eta_count = 0;
  std::string grid = "log";
  std::string out;
  std::uint64_t seed = 0;
};

std::vector<double> eta_grid(const SweepArgs& a) {
  if (!a.etas.empty()) return a.etas;
  if (a.eta_count < 1) throw UsageError("empty eta grid (give --eta or --eta-count >= 1)");
  if (!(a.eta_min > 0.0) || !(a.eta_max >= a.eta_min))
    throw UsageError("eta grid needs 0 < --eta-min <= --eta-max");
  if (a.grid != "log" && a.grid != "linear") throw UsageError("unknown --grid '" + a.grid + "' (expected log|linear)");
  return make_grid(a.eta_min, a.eta_max, a.eta_count, a.grid == "log" ? GridKind::Log : GridKind::Linear);
}

int cmd_sweep(const SweepArgs& a) {
  const ProblemInstance inst = load(a.file);
  if (classify(inst) == MinimumClass::Invalid) throw ValidationError("instance is not a regular minimum");
  SweepSpec spec{eta_grid(a), a.batches};
  try {
    spec.validate(inst.n());
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const std::vector<SweepRow> rows = sweep_rows(inst, spec, a.seed);
  with_output(a.out, [&](std::ostream& os) { csv::write_sweep(os, rows); });
  if (!a.out.empty() && a.out != "-") std::cout << "wrote " << rows.size() << " rows to " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::string file;
  double eta = 0.0;
  std::optional<int> batch;
  std::optional<double> mixture_p;
  bool exact = false;
  long steps = 1000;
  int replicates = 200;
  std::uint64_t seed = 0;
  double divergence_factor = 1e6;
  double init_scale = 1.0;
  std::string estimator = "weighted";
  long record_every = 1;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a) {
  const ProblemInstance inst = load(a.file);
  if (classify(inst) == MinimumClass::Invalid) throw ValidationError("instance is not a regular minimum");
  if (a.batch.has_value() == a.mixture_p.has_value()) throw UsageError("give exactly one of --batch, --mixture-p");
  if (!(a.eta >= 0.0)) throw UsageError("--eta must be >= 0");

  SimConfig cfg;
  cfg.steps = a.steps;
  cfg.replicates = a.replicates;
  cfg.seed = a.seed;
  cfg.divergence_factor = a.divergence_factor;
  cfg.init_scale = a.init_scale;
  cfg.estimator = parse_estimator(a.estimator);
  cfg.record_every = a.record_every;
  cfg.validate();

  if (a.exact) {
    if (!a.batch) throw UsageError("--exact requires --batch");
    const Vector x0 = initial_offset(inst, cfg);
    const auto rows = exact_trajectory(inst, {a.eta, *a.batch}, MomentState::point(x0), a.steps, a.record_every);
    with_output(a.out, [&](std::ostream& os) { csv::write_trajectory(os, rows); });
    std::cerr << "final trace_sigma_perp = " << csv::real(rows.back().trace_sigma_perp) << '\n';
    return 0;
  }
  const EmpiricalMoments m = a.batch ? simulate_sgd(inst, {a.eta, *a.batch}, cfg)
                                     : simulate_mixture(inst, a.eta, *a.mixture_p, cfg);
  with_output(a.out, [&](std::ostream& os) { csv::write_trajectory(os, m); });
  std::cerr << "estimator " << to_string(m.estimator) << ", replicates " << m.replicates
            << ", diverged_count " << m.diverged_count;
  if (m.divergence_step) std::cerr << ", first divergence at step " << *m.divergence_step;
  std::cerr << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string suite = "all";
  std::uint64_t seed = 1;
  int trials = 20;
  std::string fault;
};

int cmd_verify(const VerifyArgs& a) {
  verify::Options o;
  o.seed = a.seed;
  o.trials = a.trials;
  if (a.trials < 1) throw UsageError("--trials must be >= 1");
  const verify::Suite suite = [&] {
    try {
      return verify::parse_suite(a.suite);
    } catch (const InvalidArgument& e) {
      throw UsageError(e.what());
    }
  }();
  o.fault = verify::parse_fault(a.fault);
  const verify::Report r = verify::run(suite, o);
  r.print(std::cout);
  if (!r.ok()) {
    for (const auto& p : r.properties)
      if (!p.ok()) std::cerr << "verification failed: " << p.name << '\n';
    return kExitVerify;
  }
  std::cout << "all properties passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mean-square stability analysis of linearized SGD at a minimum"};
  app.require_subcommand(1);

  GenArgs ga;
  auto* gen = app.add_subcommand("gen", "generate a problem instance");
  gen->add_option("--kind", ga.kind, "interpolating|regular|s1|s2|s3")->capture_default_str();
  gen->add_option("--d", ga.d, "parameter dimension")->capture_default_str();
  gen->add_option("--n", ga.n, "number of samples")->capture_default_str();
  gen->add_option("--rank", ga.rank, "rank of each per-sample Hessian")->capture_default_str();
  gen->add_option("--seed", ga.seed)->capture_default_str();
  gen->add_option("--grad-scale", ga.grad_scale, "gradient scale (regular)")->capture_default_str();
  gen->add_flag("--null-grad", ga.null_grad, "keep null-space gradient components (regular)");
  gen->add_flag("--normalize", ga.normalize, "scale Hessians so lambda_max(H) = 1");
  gen->add_option("--out", ga.out, "output JSON file")->required();

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "print thresholds and bounds");
  analyze->add_option("file", aa.file, "instance JSON")->required();
  analyze->add_option("--batch", aa.batch)->capture_default_str();
  analyze->add_option("--eta", aa.etas, "step sizes to classify");
  analyze->add_option("--csv", aa.csv, "write per-eta classification CSV");
  analyze->add_option("--seed", aa.seed, "rank-one search seed")->capture_default_str();

  SweepArgs sa;
  auto* sweep = app.add_subcommand("sweep", "threshold chain over a (B, eta) grid");
  sweep->add_option("file", sa.file, "instance JSON")->required();
  sweep->add_option("--batch", sa.batches, "batch sizes")->required();
  sweep->add_option("--eta", sa.etas, "explicit step sizes");
  sweep->add_option("--eta-min", sa.eta_min);
  sweep->add_option("--eta-max", sa.eta_max);
  sweep->add_option("--eta-count", sa.eta_count);
  sweep->add_option("--grid", sa.grid, "log|linear")->capture_default_str();
  sweep->add_option("--out", sa.out, "output CSV (default stdout)");
  sweep->add_option("--seed", sa.seed, "rank-one search seed")->capture_default_str();

  SimulateArgs ma;
  auto* simulate = app.add_subcommand("simulate", "simulate SGD or the mixture process");
  simulate->add_option("file", ma.file, "instance JSON")->required();
  simulate->add_option("--eta", ma.eta)->required();
  simulate->add_option("--batch", ma.batch);
  simulate->add_option("--mixture-p", ma.mixture_p);
  simulate->add_flag("--exact", ma.exact, "iterate the exact moment recursion instead");
  simulate->add_option("--steps", ma.steps)->capture_default_str();
  simulate->add_option("--replicates", ma.replicates)->capture_default_str();
  simulate->add_option("--seed", ma.seed)->capture_default_str();
  simulate->add_option("--divergence-factor", ma.divergence_factor)->capture_default_str();
  simulate->add_option("--init-scale", ma.init_scale)->capture_default_str();
  simulate->add_option("--estimator", ma.estimator, "weighted|independent")->capture_default_str();
  simulate->add_option("--record-every", ma.record_every)->capture_default_str();
  simulate->add_option("--out", ma.out, "output CSV (default stdout)");

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "run randomized property suites");
  ver->add_option("--suite", va.suite, "kron|thresholds|moments|mixture|all")->capture_default_str();
  ver->add_option("--seed", va.seed)->capture_default_str();
  ver->add_option("--trials", va.trials)->capture_default_str();
  ver->add_option("--inject-fault", va.fault)->group("");  // harness self-test only

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(ga);
    if (*analyze) return cmd_analyze(aa);
    if (*sweep) return cmd_sweep(sa);
    if (*simulate) return cmd_simulate(ma);
    if (*ver) return cmd_verify(va);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitUsage;
}
