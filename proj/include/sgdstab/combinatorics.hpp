#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "sgdstab/error.hpp"

namespace sgdstab {

/// Binomial coefficient C(n, k), saturating at UINT64_MAX on overflow.
inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  if (k > n - k) k = n - k;
  std::uint64_t out = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    const std::uint64_t num = n - k + i;
    // out * num / i is exact at every step; guard the multiplication.
    if (out > std::numeric_limits<std::uint64_t>::max() / num)
      return std::numeric_limits<std::uint64_t>::max();
    out = out * num / i;
  }
  return out;
}

/// Calls f(indices) for every size-k subset of {0, ..., n-1} in lexicographic
/// order. `indices` is sorted ascending.
template <class F>
void for_each_subset(int n, int k, F&& f) {
  if (k < 0 || k > n) throw InvalidArgument("for_each_subset: need 0 <= k <= n");
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
  while (true) {
    f(std::span<const int>(idx));
    int pos = k - 1;
    while (pos >= 0 && idx[static_cast<std::size_t>(pos)] == n - k + pos) --pos;
    if (pos < 0) return;
    ++idx[static_cast<std::size_t>(pos)];
    for (int j = pos + 1; j < k; ++j)
      idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

}  // namespace sgdstab
