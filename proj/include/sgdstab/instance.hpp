#pragma once

// Minimum-description data model: per-sample Hessians H_i and gradients g_i
// at a minimum, its classification, random generators and JSON persistence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgdstab/error.hpp"
#include "sgdstab/linalg.hpp"
#include "sgdstab/random.hpp"

namespace sgdstab {

/// Per-sample Hessians and gradients of the training loss at a minimum. The
/// minimum itself is implicit; dynamics are tracked as offsets from it.
class ProblemInstance {
 public:
  ProblemInstance() = default;

  /// Validates shapes, symmetry (1e-9 relative) and that the gradients average
  /// to zero. Errors name the offending sample index.
  ProblemInstance(std::vector<Matrix> hessians, std::vector<Vector> gradients,
                  std::string label = {})
      : label_(std::move(label)) {
    if (hessians.empty()) throw ValidationError("instance has no samples");
    if (hessians.size() != gradients.size())
      throw ValidationError("instance has " + std::to_string(hessians.size()) +
                            " Hessians but " + std::to_string(gradients.size()) + " gradients");
    d_ = hessians.front().rows();
    if (d_ < 1) throw ValidationError("instance dimension must be positive");
    hessians_.reserve(hessians.size());
    for (std::size_t i = 0; i < hessians.size(); ++i) {
      const Matrix& h = hessians[i];
      if (h.rows() != d_ || h.cols() != d_)
        throw ValidationError("sample " + std::to_string(i) + ": Hessian is not " +
                              std::to_string(d_) + "x" + std::to_string(d_));
      if (gradients[i].size() != d_)
        throw ValidationError("sample " + std::to_string(i) + ": gradient has length " +
                              std::to_string(gradients[i].size()));
      if (!h.allFinite() || !gradients[i].allFinite())
        throw ValidationError("sample " + std::to_string(i) + ": non-finite entries");
      const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
      if ((h - h.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale)
        throw ValidationError("sample " + std::to_string(i) + ": Hessian is not symmetric");
      hessians_.emplace_back(h);
    }
    gradients_ = std::move(gradients);

    double gmax = 0.0;
    Vector mean = Vector::Zero(d_);
    for (const Vector& g : gradients_) {
      gmax = std::max(gmax, g.norm());
      mean += g;
    }
    mean /= static_cast<double>(gradients_.size());
    if (mean.norm() > 1e-10 * gmax)
      throw ValidationError("gradients do not sum to zero (|mean| = " +
                            std::to_string(mean.norm()) + ")");
  }

  Index d() const noexcept { return d_; }
  int n() const noexcept { return static_cast<int>(hessians_.size()); }
  const std::vector<SymMatrix>& hessians() const noexcept { return hessians_; }
  const std::vector<Vector>& gradients() const noexcept { return gradients_; }
  const std::string& label() const noexcept { return label_; }

  /// Same instance with every H_i multiplied by c.
  ProblemInstance scaled_hessians(double c) const {
    std::vector<Matrix> h;
    for (const auto& hi : hessians_) h.push_back(c * hi.matrix());
    return ProblemInstance(std::move(h), gradients_, label_);
  }

  friend bool operator==(const ProblemInstance& a, const ProblemInstance& b) {
    if (a.d_ != b.d_ || a.label_ != b.label_ || a.hessians_.size() != b.hessians_.size())
      return false;
    for (std::size_t i = 0; i < a.hessians_.size(); ++i)
      if (!(a.hessians_[i] == b.hessians_[i]) || a.gradients_[i] != b.gradients_[i]) return false;
    return true;
  }

 private:
  Index d_ = 0;
  std::vector<SymMatrix> hessians_;
  std::vector<Vector> gradients_;
  std::string label_;
};

enum class MinimumClass { Interpolating, Regular, Invalid };

inline const char* to_string(MinimumClass c) {
  switch (c) {
    case MinimumClass::Interpolating: return "interpolating";
    case MinimumClass::Regular: return "regular";
    case MinimumClass::Invalid: return "invalid";
  }
  return "?";
}

/// Step size and batch size.
struct Hyperparams {
  double eta = 0.0;
  int batch = 1;
};

/// Mixing weight p = (n - B) / (B (n - 1)); zero when n == 1.
inline double p_of_batch(int n, int b) {
  if (n < 1 || b < 1 || b > n)
    throw InvalidArgument("batch size " + std::to_string(b) + " outside [1, " +
                          std::to_string(n) + "]");
  if (n == 1) return 0.0;
  return static_cast<double>(n - b) / (static_cast<double>(b) * static_cast<double>(n - 1));
}

inline bool is_psd(const SymMatrix& m, double rel_tol = kDefaultRankTol) {
  const EigDecomp eig = sym_eig(m, rel_tol);
  return eig.lambda_min() >= -rel_tol * eig.lambda_max();
}

inline MinimumClass classify(const ProblemInstance& inst, double rel_tol = kDefaultRankTol) {
  double gmax = 0.0;
  Vector mean = Vector::Zero(inst.d());
  for (const Vector& g : inst.gradients()) {
    gmax = std::max(gmax, g.norm());
    mean += g;
  }
  mean /= static_cast<double>(inst.n());
  if (mean.norm() > 1e-10 * gmax) return MinimumClass::Invalid;
  for (const SymMatrix& h : inst.hessians())
    if (!is_psd(h, rel_tol)) return MinimumClass::Invalid;
  return gmax <= 1e-12 ? MinimumClass::Interpolating : MinimumClass::Regular;
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

struct GenOptions {
  /// Rescale all H_i so that lambda_max(mean H_i) == 1.
  bool normalize = false;
  /// Dimension of a common random subspace holding every range(H_i); 0 means
  /// the whole space (or d - 1 for gen_regular with null_grad, so that H has
  /// a null space for the gradients to live in).
  Index support_dim = 0;
};

namespace detail {

inline std::vector<Matrix> wishart_hessians(Index d, int n, Index rank, Index support, Rng& rng) {
  Matrix basis = Matrix::Identity(d, d);
  if (support < d) {
    Eigen::HouseholderQR<Matrix> qr(standard_normal(d, support, rng));
    basis = qr.householderQ() * Matrix::Identity(d, support);
  }
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Matrix g = basis * standard_normal(basis.cols(), rank, rng);
    out.push_back(g * g.transpose());
  }
  return out;
}

inline void normalize_hessians(std::vector<Matrix>& hs) {
  Matrix mean = Matrix::Zero(hs.front().rows(), hs.front().cols());
  for (const auto& h : hs) mean += h;
  mean /= static_cast<double>(hs.size());
  const double top = lambda_max(SymMatrix(mean));
  if (top > 0.0)
    for (auto& h : hs) h /= top;
}

inline void check_gen_args(Index d, int n, Index rank) {
  if (d < 1 || n < 1) throw InvalidArgument("generator: need d >= 1 and n >= 1");
  if (rank < 1 || rank > d)
    throw InvalidArgument("generator: rank " + std::to_string(rank) + " outside [1, " +
                          std::to_string(d) + "]");
}

}  // namespace detail

/// Interpolating instance: H_i = G_i G_i^T with G_i a d x rank standard normal
/// matrix, all g_i = 0.
inline ProblemInstance gen_interpolating(Index d, int n, Index rank, std::uint64_t seed,
                                         GenOptions opts = {}) {
  detail::check_gen_args(d, n, rank);
  Rng rng(stream_seed(seed, 1));
  const Index support = opts.support_dim == 0 ? d : std::min(opts.support_dim, d);
  auto hs = detail::wishart_hessians(d, n, rank, support, rng);
  if (opts.normalize) detail::normalize_hessians(hs);
  std::vector<Vector> gs(static_cast<std::size_t>(n), Vector::Zero(d));
  return ProblemInstance(std::move(hs), std::move(gs),
                         "interpolating d=" + std::to_string(d) + " n=" + std::to_string(n) +
                             " rank=" + std::to_string(rank) + " seed=" + std::to_string(seed));
}

/// Regular instance: Hessians as in gen_interpolating, gradients are scaled
/// standard normals, mean-centered. Unless null_grad is set, each gradient is
/// also projected onto range(H) so that it has no null-space component.
inline ProblemInstance gen_regular(Index d, int n, Index rank, double grad_scale, bool null_grad,
                                   std::uint64_t seed, GenOptions opts = {}) {
  detail::check_gen_args(d, n, rank);
  if (!(grad_scale >= 0.0)) throw InvalidArgument("generator: grad_scale must be >= 0");
  Rng rng(stream_seed(seed, 2));
  Index support = opts.support_dim == 0 ? d : std::min(opts.support_dim, d);
  if (opts.support_dim == 0 && null_grad && d > 1) support = d - 1;
  auto hs = detail::wishart_hessians(d, n, rank, support, rng);
  if (opts.normalize) detail::normalize_hessians(hs);

  std::vector<Vector> gs;
  Vector mean = Vector::Zero(d);
  for (int i = 0; i < n; ++i) {
    gs.push_back(grad_scale * standard_normal(d, rng));
    mean += gs.back();
  }
  mean /= static_cast<double>(n);
  for (auto& g : gs) g -= mean;

  if (!null_grad) {
    Matrix h = Matrix::Zero(d, d);
    for (const auto& hi : hs) h += hi;
    h /= static_cast<double>(n);
    const Matrix perp = null_projectors(SymMatrix(h)).perp.matrix();
    for (auto& g : gs) g = perp * g;
  }
  if (grad_scale == 0.0)
    for (auto& g : gs) g.setZero();
  return ProblemInstance(std::move(hs), std::move(gs),
                         "regular d=" + std::to_string(d) + " n=" + std::to_string(n) +
                             " rank=" + std::to_string(rank) + " seed=" + std::to_string(seed));
}

/// Small hand-checkable instances used throughout the tests and the CLI.
namespace fixtures {

/// d=1, n=2, H = {1, 3}, g = {0, 0}. Interpolating; lambda_max(H) = 2.
inline ProblemInstance s1() {
  return ProblemInstance({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 3.0)},
                         {Vector::Zero(1), Vector::Zero(1)}, "S1");
}

/// d=1, n=2, H = {1, 1}, g = {1, -1}. Regular.
inline ProblemInstance s2() {
  return ProblemInstance({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 1.0)},
                         {Vector::Constant(1, 1.0), Vector::Constant(1, -1.0)}, "S2");
}

/// d=2, n=2, H_i = diag(1, 0), g = {+e2, -e2}. Regular, gradients entirely in
/// the null space of H.
inline ProblemInstance s3() {
  Matrix h = Matrix::Zero(2, 2);
  h(0, 0) = 1.0;
  return ProblemInstance({h, h}, {Vector::Unit(2, 1), -Vector::Unit(2, 1)}, "S3");
}

}  // namespace fixtures

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace detail {

inline void write_real(std::ostream& os, double x) {
  std::ostringstream tmp;
  tmp << std::setprecision(17) << x;
  os << tmp.str();
}

}  // namespace detail

/// Writes the instance as a single JSON document with row-major Hessians and
/// 17 significant digits per real.
inline void write_instance(std::ostream& os, const ProblemInstance& inst) {
  os << "{\"d\": " << inst.d() << ", \"n\": " << inst.n() << ",\n \"hessians\": [";
  for (int i = 0; i < inst.n(); ++i) {
    const Matrix& h = inst.hessians()[static_cast<std::size_t>(i)].matrix();
    os << (i ? ",\n  [" : "\n  [");
    for (Index r = 0; r < inst.d(); ++r)
      for (Index c = 0; c < inst.d(); ++c) {
        if (r || c) os << ", ";
        detail::write_real(os, h(r, c));
      }
    os << "]";
  }
  os << "],\n \"gradients\": [";
  for (int i = 0; i < inst.n(); ++i) {
    const Vector& g = inst.gradients()[static_cast<std::size_t>(i)];
    os << (i ? ",\n  [" : "\n  [");
    for (Index k = 0; k < inst.d(); ++k) {
      if (k) os << ", ";
      detail::write_real(os, g(k));
    }
    os << "]";
  }
  os << "],\n \"label\": " << nlohmann::json(inst.label()).dump() << "}\n";
}

inline ProblemInstance read_instance(std::istream& is) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed instance file: ") + e.what());
  }
  try {
    const auto d = doc.at("d").get<Index>();
    const auto n = doc.at("n").get<int>();
    if (d < 1 || n < 1) throw ValidationError("instance file: d and n must be positive");
    const auto& hs = doc.at("hessians");
    const auto& gs = doc.at("gradients");
    if (!hs.is_array() || !gs.is_array() || hs.size() != static_cast<std::size_t>(n) ||
        gs.size() != static_cast<std::size_t>(n))
      throw ValidationError("instance file: expected " + std::to_string(n) +
                            " Hessians and gradients");
    std::vector<Matrix> hessians;
    std::vector<Vector> gradients;
    for (int i = 0; i < n; ++i) {
      const auto hv = hs[static_cast<std::size_t>(i)].get<std::vector<double>>();
      const auto gv = gs[static_cast<std::size_t>(i)].get<std::vector<double>>();
      if (hv.size() != static_cast<std::size_t>(d * d) || gv.size() != static_cast<std::size_t>(d))
        throw ValidationError("sample " + std::to_string(i) + ": wrong number of entries");
      Matrix h(d, d);
      for (Index r = 0; r < d; ++r)
        for (Index c = 0; c < d; ++c) h(r, c) = hv[static_cast<std::size_t>(r * d + c)];
      hessians.push_back(std::move(h));
      gradients.push_back(Eigen::Map<const Vector>(gv.data(), d));
    }
    std::string label = doc.contains("label") ? doc.at("label").get<std::string>() : "";
    return ProblemInstance(std::move(hessians), std::move(gradients), std::move(label));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed instance file: ") + e.what());
  }
}

inline void save(const ProblemInstance& inst, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open " + path + " for writing");
  write_instance(os, inst);
  if (!os) throw ValidationError("failed writing " + path);
}

inline ProblemInstance load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open instance file " + path);
  return read_instance(is);
}

}  // namespace sgdstab
