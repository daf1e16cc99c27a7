#pragma once

#include <string>
#include <utility>
#include <vector>

#include "flowvae/errors.hpp"
#include "flowvae/ops.hpp"

namespace flowvae {

/// Channel partitions used by coupling layers. Continuous splits take the
/// first/second half, alternate splits take even/odd channels; the BA
/// variants swap which part conditions the other.
enum class SplitPattern { ContinuousAB, ContinuousBA, AlternateAB, AlternateBA };

inline const char* to_string(SplitPattern p) {
  switch (p) {
    case SplitPattern::ContinuousAB: return "continuous_ab";
    case SplitPattern::ContinuousBA: return "continuous_ba";
    case SplitPattern::AlternateAB: return "alternate_ab";
    case SplitPattern::AlternateBA: return "alternate_ba";
  }
  return "?";
}

/// Channel indices of (x_a, x_b) for `c` channels.
inline std::pair<std::vector<int>, std::vector<int>> split_indices(SplitPattern p, int c) {
  if (c % 2 != 0 || c <= 0) throw ConfigError("split needs an even channel count, got " + std::to_string(c));
  const int h = c / 2;
  std::vector<int> first, second;
  for (int i = 0; i < h; ++i) {
    const bool alternate = p == SplitPattern::AlternateAB || p == SplitPattern::AlternateBA;
    first.push_back(alternate ? 2 * i : i);
    second.push_back(alternate ? 2 * i + 1 : h + i);
  }
  if (p == SplitPattern::ContinuousBA || p == SplitPattern::AlternateBA) std::swap(first, second);
  return {first, second};
}

template <class T>
std::pair<Var<T>, Var<T>> split_channels(Var<T> x, SplitPattern p) {
  auto [ia, ib] = split_indices(p, x.dim(-1));
  return {ops::gather_last(x, ia), ops::gather_last(x, ib)};
}

template <class T>
Var<T> merge_channels(Var<T> xa, Var<T> xb, SplitPattern p) {
  auto [ia, ib] = split_indices(p, xa.dim(-1) + xb.dim(-1));
  return ops::merge_last(xa, xb, ia, ib);
}

}  // namespace flowvae
