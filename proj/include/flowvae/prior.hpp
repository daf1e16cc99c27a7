#pragma once

#include <memory>
#include <string>
#include <vector>

#include "flowvae/flows/actnorm.hpp"
#include "flowvae/flows/coupling.hpp"
#include "flowvae/flows/invconv.hpp"

namespace flowvae {

/// Affine coupling over a vector: the first half of z drives an ELU MLP with
/// two hidden layers whose zero-initialized output gives (u, bias) for the
/// second half.
template <class T>
class VectorCoupling {
 public:
  VectorCoupling(ParamRegistry<T>& reg, const std::string& prefix, int dim, int hidden, T alpha, Rng& rng)
      : dim_(dim), alpha_(alpha) {
    const int half = dim / 2;
    w1_ = reg.add(prefix + ".fc1.weight", fan_in_normal<T>(rng, {half, hidden}, half));
    b1_ = reg.add(prefix + ".fc1.bias", Tensor<T>(Shape{hidden}));
    w2_ = reg.add(prefix + ".fc2.weight", fan_in_normal<T>(rng, {hidden, hidden}, hidden));
    b2_ = reg.add(prefix + ".fc2.bias", Tensor<T>(Shape{hidden}));
    w3_ = reg.add(prefix + ".fc3.weight", Tensor<T>(Shape{hidden, dim}));
    b3_ = reg.add(prefix + ".fc3.bias", Tensor<T>(Shape{dim}));
  }

  FlowResult<T> apply(Graph<T>& g, Var<T> x, Direction dir) {
    const int half = dim_ / 2;
    auto [xa, xb] = split_channels(x, SplitPattern::ContinuousAB);
    Var<T> h = ops::elu(ops::linear(xa, g.param(*w1_), g.param(*b1_)));
    h = ops::elu(ops::linear(h, g.param(*w2_), g.param(*b2_)));
    Var<T> out = ops::linear(h, g.param(*w3_), g.param(*b3_));
    Var<T> s = scale_transform(ops::slice_last(out, 0, half), alpha_);
    Var<T> bias = ops::slice_last(out, half, half);
    for (T v : s.value().values())
      if (!(v > T(1e-6))) throw NumericError("prior coupling scale collapsed below 1e-6");
    Var<T> ld = ops::sum_rows(ops::log(s));
    if (dir == Direction::Forward)
      return {merge_channels(xa, ops::add(ops::mul(s, xb), bias), SplitPattern::ContinuousAB), ld};
    return {merge_channels(xa, ops::div(ops::sub(xb, bias), s), SplitPattern::ContinuousAB), ops::scale(ld, T(-1))};
  }

 private:
  int dim_;
  T alpha_;
  Param<T>* w1_;
  Param<T>* b1_;
  Param<T>* w2_;
  Param<T>* b2_;
  Param<T>* w3_;
  Param<T>* b3_;
};

/// Flow prior p(z): z → ε through steps of actnorm, invertible linear map and
/// vector coupling, log p(z) = log N(ε; 0, I) + log|det ∂ε/∂z|. Every layer
/// starts as the identity, so the initial prior is N(0, I).
template <class T>
class PriorFlow {
 public:
  PriorFlow(ParamRegistry<T>& reg, const std::string& prefix, int dim, int depth, int hidden, T alpha, Rng& rng)
      : dim_(dim) {
    if (dim % 2 != 0) throw ConfigError("prior flow needs an even dimension");
    for (int i = 0; i < depth; ++i) {
      const std::string p = prefix + ".step" + std::to_string(i);
      auto step = std::make_unique<Step>(Step{Actnorm<T>(reg, p + ".actnorm", dim),
                                              InvConv<T>(reg, p + ".linear", dim, InvConv<T>::Init::Identity, rng),
                                              VectorCoupling<T>(reg, p + ".coupling", dim, hidden, alpha, rng)});
      step->actnorm.set_initialized(true);
      steps_.push_back(std::move(step));
    }
  }

  int dim() const { return dim_; }

  /// z[n, d] → ε with the forward log-det.
  FlowResult<T> to_base(Graph<T>& g, Var<T> z) {
    check(z);
    Var<T> ld = zero_logdet(g, z.dim(0));
    Var<T> h = z;
    for (auto& s : steps_) {
      FlowResult<T> r = s->actnorm.apply(g, h, Direction::Forward);
      ld = ops::add(ld, r.logdet);
      r = s->linear.apply(g, r.y, Direction::Forward);
      ld = ops::add(ld, r.logdet);
      r = s->coupling.apply(g, r.y, Direction::Forward);
      h = r.y;
      ld = ops::add(ld, r.logdet);
    }
    return {h, ld};
  }

  /// ε[n, d] → z.
  Var<T> from_base(Graph<T>& g, Var<T> eps) {
    check(eps);
    Var<T> h = eps;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      h = (*it)->coupling.apply(g, h, Direction::Inverse).y;
      h = (*it)->linear.apply(g, h, Direction::Inverse).y;
      h = (*it)->actnorm.apply(g, h, Direction::Inverse).y;
    }
    return h;
  }

  /// log p(z) in nats, shape [n].
  Var<T> log_prob(Graph<T>& g, Var<T> z) {
    FlowResult<T> r = to_base(g, z);
    return ops::add(ops::std_normal_log_prob(r.y), r.logdet);
  }

  /// z = f⁻¹(temperature · noise).
  Tensor<T> sample(const Tensor<T>& noise, T temperature) {
    if (temperature < T(0)) throw ConfigError("temperature must be >= 0");
    Graph<T> g(false);
    return from_base(g, ops::scale(g.constant(noise), temperature)).value();
  }

 private:
  struct Step {
    Actnorm<T> actnorm;
    InvConv<T> linear;
    VectorCoupling<T> coupling;
  };

  void check(Var<T> v) const {
    if (v.value().rank() != 2 || v.dim(1) != dim_)
      throw ConfigError("prior: expected [n," + std::to_string(dim_) + "], got " + shape_str(v.shape()));
  }

  int dim_;
  std::vector<std::unique_ptr<Step>> steps_;
};

}  // namespace flowvae
