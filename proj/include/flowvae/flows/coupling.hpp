#pragma once

#include <optional>
#include <string>
#include <utility>

#include "flowvae/flows/flow_base.hpp"
#include "flowvae/flows/split.hpp"

namespace flowvae {

/// s = α · tanh(u / 2) + 1, confined to (1 − α, 1 + α).
template <class T>
Var<T> scale_transform(Var<T> u, T alpha) {
  return ops::add_scalar(ops::scale(ops::tanh(ops::scale(u, T(0.5))), alpha), T(1));
}

template <class T>
struct CouplingOptions {
  int channels = 0;   // c, even
  int hidden = 64;    // width of the conditioner
  int cond_dim = 0;   // d_z; 0 disables the FC(z) injection
  T alpha = T(1);
  bool affine = true;  // false: additive coupling, s ≡ 1
};

/// Conditional affine coupling on images. The conditioner is
/// Conv3×3 → ELU → Conv1×1 ⊕ FC(z) → ELU → Conv3×3, where ⊕ adds the FC(z)
/// vector to every spatial position. The last conv starts at zero so a new
/// layer is the identity.
template <class T>
class Coupling {
 public:
  Coupling(ParamRegistry<T>& reg, const std::string& prefix, const CouplingOptions<T>& opt, SplitPattern pattern,
           Rng& rng)
      : opt_(opt), pattern_(pattern) {
    if (opt.channels % 2 != 0 || opt.channels < 2)
      throw ConfigError("coupling needs an even channel count, got " + std::to_string(opt.channels));
    const int half = opt.channels / 2, nh = opt.hidden;
    conv1_k_ = reg.add(prefix + ".conv1.kernel", fan_in_normal<T>(rng, {3, 3, half, nh}, 9 * half));
    conv1_b_ = reg.add(prefix + ".conv1.bias", Tensor<T>(Shape{nh}));
    if (opt.cond_dim > 0) {
      fc_w_ = reg.add(prefix + ".cond_fc.weight", fan_in_normal<T>(rng, {opt.cond_dim, nh}, opt.cond_dim));
      fc_b_ = reg.add(prefix + ".cond_fc.bias", Tensor<T>(Shape{nh}));
    }
    conv2_k_ = reg.add(prefix + ".conv2.kernel", fan_in_normal<T>(rng, {1, 1, nh, nh}, nh));
    conv2_b_ = reg.add(prefix + ".conv2.bias", Tensor<T>(Shape{nh}));
    conv3_k_ = reg.add(prefix + ".conv3.kernel", Tensor<T>(Shape{3, 3, nh, opt.channels}));
    conv3_b_ = reg.add(prefix + ".conv3.bias", Tensor<T>(Shape{opt.channels}));
  }

  SplitPattern pattern() const { return pattern_; }
  const CouplingOptions<T>& options() const { return opt_; }
  Param<T>& conv3_kernel() { return *conv3_k_; }
  Param<T>& conv3_bias() { return *conv3_b_; }

  /// (u, bias) from the conditioning half and z.
  std::pair<Var<T>, Var<T>> cond_net(Graph<T>& g, Var<T> xa, std::optional<Var<T>> z) {
    const int half = opt_.channels / 2;
    if (xa.dim(-1) != half) throw ConfigError("coupling conditioner: channel mismatch " + shape_str(xa.shape()));
    Var<T> h = ops::elu(ops::conv2d(xa, g.param(*conv1_k_), g.param(*conv1_b_), 1, 1));
    h = ops::conv2d(h, g.param(*conv2_k_), g.param(*conv2_b_), 1, 0);
    if (opt_.cond_dim > 0) {
      if (!z) throw ConfigError("conditional coupling called without z");
      if (z->value().rank() != 2 || z->dim(0) != xa.dim(0) || z->dim(1) != opt_.cond_dim)
        throw ConfigError("coupling: z shape " + shape_str(z->shape()));
      h = ops::add_channel_rows(h, ops::linear(*z, g.param(*fc_w_), g.param(*fc_b_)));
    }
    h = ops::elu(h);
    Var<T> out = ops::conv2d(h, g.param(*conv3_k_), g.param(*conv3_b_), 1, 1);
    return {ops::slice_last(out, 0, half), ops::slice_last(out, half, half)};
  }

  FlowResult<T> apply(Graph<T>& g, Var<T> x, std::optional<Var<T>> z, Direction dir) {
    if (x.dim(-1) != opt_.channels) throw ConfigError("coupling: channel mismatch " + shape_str(x.shape()));
    auto [xa, xb] = split_channels(x, pattern_);
    auto [u, bias] = cond_net(g, xa, z);
    const int n = x.dim(0);
    if (!opt_.affine) {
      Var<T> yb = dir == Direction::Forward ? ops::add(xb, bias) : ops::sub(xb, bias);
      return {merge_channels(xa, yb, pattern_), zero_logdet(g, n)};
    }
    Var<T> s = scale_transform(u, opt_.alpha);
    for (T v : s.value().values())
      if (!(v > T(1e-6))) throw NumericError("coupling scale collapsed below 1e-6");
    Var<T> ld = ops::sum_rows(ops::log(s));
    if (dir == Direction::Forward) return {merge_channels(xa, ops::add(ops::mul(s, xb), bias), pattern_), ld};
    return {merge_channels(xa, ops::div(ops::sub(xb, bias), s), pattern_), ops::scale(ld, T(-1))};
  }

 private:
  CouplingOptions<T> opt_;
  SplitPattern pattern_;
  Param<T>* conv1_k_ = nullptr;
  Param<T>* conv1_b_ = nullptr;
  Param<T>* fc_w_ = nullptr;
  Param<T>* fc_b_ = nullptr;
  Param<T>* conv2_k_ = nullptr;
  Param<T>* conv2_b_ = nullptr;
  Param<T>* conv3_k_ = nullptr;
  Param<T>* conv3_b_ = nullptr;
};

}  // namespace flowvae
