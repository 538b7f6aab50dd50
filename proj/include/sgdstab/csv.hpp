#pragma once

// CSV export: comma-separated, header row, LF line endings, 17 significant digits.

#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sgdstab/moments.hpp"
#include "sgdstab/montecarlo.hpp"
#include "sgdstab/sweep.hpp"

namespace sgdstab::csv {

inline std::string real(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline constexpr const char* kTrajectoryHeader = "t,trace_sigma_perp,trace_sigma_par,mu_norm,loss_gap_estimate";

inline void write_trajectory(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
  os << kTrajectoryHeader << '\n';
  for (const TrajectoryRow& r : rows)
    os << r.t << ',' << real(r.trace_sigma_perp) << ',' << real(r.trace_sigma_par) << ','
       << real(r.mu_norm) << ',' << real(r.loss_gap_estimate) << '\n';
}

/// Monte-Carlo trajectory: the exact-trajectory columns plus replicates and
/// diverged_count (replicates flagged up to each row).
inline void write_trajectory(std::ostream& os, const EmpiricalMoments& m) {
  os << kTrajectoryHeader << ",replicates,diverged_count\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << m.t[i] << ',' << real(m.sq_perp[i]) << ',' << real(m.sq_par[i]) << ','
       << real(m.mean[i].norm()) << ',' << real(m.loss_gap[i]) << ',' << m.replicates << ','
       << m.diverged_by[i] << '\n';
  }
}

inline constexpr const char* kSweepHeader = "B,eta,two_over_eta,lambda_CdagD,rank_one_bound,eq14_value,sharpness";

inline void write_sweep(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << kSweepHeader << '\n';
  for (const SweepRow& r : rows)
    os << r.batch << ',' << real(r.eta) << ',' << real(r.two_over_eta) << ',' << real(r.lambda_CdagD)
       << ',' << real(r.rank_one_bound) << ',' << real(r.eq14_value) << ',' << real(r.sharpness) << '\n';
}

}  // namespace sgdstab::csv
