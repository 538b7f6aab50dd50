#pragma once

// (B, eta) sweeps of the threshold chain
//   2/eta*_var = lambda_max(C^+ D) >= rank-one value >= v_max value >= lambda_max(H).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sgdstab/error.hpp"
#include "sgdstab/instance.hpp"
#include "sgdstab/stability.hpp"

namespace sgdstab {

enum class GridKind { Log, Linear };

struct SweepSpec {
  std::vector<double> etas;
  std::vector<int> batches;

  void validate(int n) const {
    if (etas.empty()) throw InvalidArgument("sweep: empty eta grid");
    if (batches.empty()) throw InvalidArgument("sweep: empty batch list");
    for (double eta : etas)
      if (!(eta > 0.0)) throw InvalidArgument("sweep: step sizes must be positive");
    for (int b : batches)
      if (b < 1 || b > n) throw InvalidArgument("sweep: batch " + std::to_string(b) + " outside [1, n]");
  }
};

/// `count` points from lo to hi inclusive.
inline std::vector<double> make_grid(double lo, double hi, int count, GridKind kind) {
  if (count < 1) throw InvalidArgument("grid: count must be >= 1");
  if (!(lo > 0.0) || !(hi >= lo)) throw InvalidArgument("grid: need 0 < lo <= hi");
  std::vector<double> g;
  g.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const double f = count == 1 ? 0.0 : static_cast<double>(k) / (count - 1);
    g.push_back(kind == GridKind::Log ? lo * std::pow(hi / lo, f) : lo + f * (hi - lo));
  }
  return g;
}

struct SweepRow {
  int batch = 0;
  double eta = 0.0;
  double two_over_eta = 0.0;
  double lambda_CdagD = 0.0;
  double rank_one_bound = 0.0;
  double eq14_value = 0.0;  // v_max value lambda + p mean((v^T H_i v - lambda)^2) / lambda
  double sharpness = 0.0;
};

/// Rows in (B, eta) order. Threshold quantities depend on (instance, B) only
/// and are computed once per batch size.
inline std::vector<SweepRow> sweep_rows(const ProblemInstance& inst, const SweepSpec& spec,
                                        std::uint64_t seed = 0) {
  spec.validate(inst.n());
  const double sharp = lambda_max(mean_hessian(inst));
  std::vector<SweepRow> rows;
  for (int b : spec.batches) {
    RankOneOptions ro;
    ro.seed = seed;
    const double gs = generalized_sharpness(inst, b);
    const double r1 = optimized_rank_one_bound(inst, b, ro).value;
    const double v = vmax_sharpness_bound(inst, b);
    for (double eta : spec.etas) rows.push_back({b, eta, 2.0 / eta, gs, r1, v, sharp});
  }
  return rows;
}

/// Largest relative violation of the chain on one row (<= 0 when it holds).
inline double chain_violation(const SweepRow& r) {
  const double scale = std::max(1e-300, std::abs(r.lambda_CdagD));
  double worst = (r.rank_one_bound - r.lambda_CdagD) / scale;
  worst = std::max(worst, (r.eq14_value - r.rank_one_bound) / scale);
  worst = std::max(worst, (r.sharpness - r.eq14_value) / scale);
  return worst;
}

}  // namespace sgdstab
