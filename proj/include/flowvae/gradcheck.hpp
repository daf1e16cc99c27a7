#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flowvae/graph.hpp"
#include "flowvae/random.hpp"

namespace flowvae {

/// Builds a scalar objective on the given graph.
template <class T>
using ScalarFn = std::function<Var<T>(Graph<T>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  int coords_checked = 0;
};

/// Compares reverse-mode gradients of `f` with central differences on up to
/// `num_coords` coordinates drawn uniformly from `params` (all coordinates
/// when num_coords <= 0). Error per coordinate is
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-12).
template <class T>
GradCheckResult finite_diff_check(const ScalarFn<T>& f, const std::vector<Param<T>*>& params, T eps = T(1e-5),
                                  int num_coords = 0, std::uint64_t seed = 0) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<T> g(true);
    Var<T> out = f(g);
    if (!out.value().all_finite()) throw NumericError("finite_diff_check: non-finite objective");
    g.backward(out);
  }
  std::vector<std::pair<Param<T>*, std::size_t>> coords;
  for (auto* p : params)
    for (std::size_t i = 0; i < p->value.size(); ++i) coords.emplace_back(p, i);
  if (num_coords > 0 && static_cast<std::size_t>(num_coords) < coords.size()) {
    Rng rng(seed);
    rng.shuffle(coords.begin(), coords.end());
    coords.resize(num_coords);
  }
  auto eval = [&f]() {
    Graph<T> g(false);
    const T v = f(g).value()[0];
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite objective");
    return v;
  };
  GradCheckResult res;
  for (auto [p, i] : coords) {
    const T orig = p->value[i];
    p->value[i] = orig + eps;
    const T up = eval();
    p->value[i] = orig - eps;
    const T down = eval();
    p->value[i] = orig;
    const double numeric = (static_cast<double>(up) - down) / (2.0 * eps);
    const double analytic = p->grad[i];
    const double err = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
    res.max_rel_error = std::max(res.max_rel_error, err);
    ++res.coords_checked;
  }
  return res;
}

}  // namespace flowvae
