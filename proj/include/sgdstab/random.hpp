#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace sgdstab {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for stream `index` of a family rooted at `seed`.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(seed ^ splitmix64(index));
}

using Rng = std::mt19937_64;

inline Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  // Fill column-major in a fixed order so results depend only on the seed.
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

inline Eigen::VectorXd standard_normal(Eigen::Index size, Rng& rng) {
  return standard_normal(size, 1, rng);
}

inline Eigen::VectorXd random_unit_vector(Eigen::Index size, Rng& rng) {
  Eigen::VectorXd v = standard_normal(size, rng);
  while (v.norm() == 0.0) v = standard_normal(size, rng);
  return v / v.norm();
}

}  // namespace sgdstab
