#pragma once

#include <cmath>
#include <string>

#include "flowvae/graph.hpp"
#include "flowvae/ops.hpp"
#include "flowvae/random.hpp"

namespace flowvae {

enum class Direction { Forward, Inverse };

/// Output of an invertible transform: the mapped tensor and the per-example
/// log|det J| of the map that was applied, shape [n].
template <class T>
struct FlowResult {
  Var<T> y;
  Var<T> logdet;
};

template <class T>
Var<T> zero_logdet(Graph<T>& g, int n) {
  return g.constant(Tensor<T>(Shape{n}));
}

// Weights drawn from N(0, 1/fan_in).
template <class T>
Tensor<T> fan_in_normal(Rng& rng, Shape shape, int fan_in) {
  return rng.normal_tensor<T>(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace flowvae
