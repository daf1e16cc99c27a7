#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "flowvae/config.hpp"
#include "flowvae/flows/flow_base.hpp"

namespace flowvae {

/// Diagonal Gaussian q(z|x) as tensors, each [n, d_z].
template <class T>
struct GaussianPosterior {
  Tensor<T> mu;
  Tensor<T> log_var;
};

inline constexpr double kLogVarClamp = 15.0;

/// z = μ + exp(log_var / 2) ⊙ noise.
template <class T>
Var<T> sample_posterior(Var<T> mu, Var<T> log_var, Var<T> noise) {
  return ops::add(mu, ops::mul(ops::exp(ops::scale(log_var, T(0.5))), noise));
}

/// Row-wise log N(z; μ, diag(exp(log_var))) in nats, shape [n].
template <class T>
Var<T> log_q(Var<T> mu, Var<T> log_var, Var<T> z) {
  Var<T> standardized = ops::mul(ops::sub(z, mu), ops::exp(ops::scale(log_var, T(-0.5))));
  return ops::sub(ops::std_normal_log_prob(standardized), ops::scale(ops::sum_rows(log_var), T(0.5)));
}

/// Compression encoder: per level a stride-1 then a stride-2 residual block
/// (conv3×3 → ELU → conv3×3, plus a 1×1 projection when shape changes, ELU
/// after the sum) down to 4×4, then a zero-initialized linear layer to
/// (μ, log σ²).
template <class T>
class Encoder {
 public:
  struct Posterior {
    Var<T> mu;
    Var<T> log_var;
  };

  Encoder(ParamRegistry<T>& reg, const std::string& prefix, const ModelConfig& cfg, Rng& rng)
      : latent_dim_(cfg.latent_dim), h_(cfg.height), c_(cfg.channels) {
    int levels = 0;
    while ((cfg.height >> (levels + 1)) >= 4) ++levels;
    int cin = cfg.channels, width = cfg.encoder_width;
    for (int l = 0; l < levels; ++l) {
      for (int stride : {1, 2}) {
        const std::string p = prefix + ".l" + std::to_string(l) + (stride == 1 ? ".block1" : ".block2");
        blocks_.push_back(make_block(reg, p, cin, width, stride, rng));
        cin = width;
      }
      width = std::min(2 * width, cfg.encoder_max_width);
    }
    const int side = cfg.height >> levels;
    const int flat = side * side * cin;
    fc_w_ = reg.add(prefix + ".out.weight", Tensor<T>(Shape{flat, 2 * latent_dim_}));
    fc_b_ = reg.add(prefix + ".out.bias", Tensor<T>(Shape{2 * latent_dim_}));
    levels_ = levels;
  }

  int levels() const { return levels_; }
  Param<T>& out_weight() { return *fc_w_; }
  Param<T>& out_bias() { return *fc_b_; }

  /// x[n, h, w, c] in [0, 1) → (μ, log σ²), log σ² clamped to ±15.
  Posterior encode(Graph<T>& g, Var<T> x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != h_ || s[2] != h_ || s[3] != c_)
      throw ConfigError("encoder: unsupported image shape " + shape_str(s));
    const int n = s[0];
    Var<T> h = ops::add_scalar(x, T(-0.5));
    for (auto& b : blocks_) {
      Var<T> r = ops::elu(ops::conv2d(h, g.param(*b.k1), g.param(*b.b1), b.stride, 1));
      r = ops::conv2d(r, g.param(*b.k2), g.param(*b.b2), 1, 1);
      Var<T> skip = b.proj_k ? ops::conv2d(h, g.param(*b.proj_k), g.param(*b.proj_b), b.stride, 0) : h;
      h = ops::elu(ops::add(r, skip));
    }
    const int flat = static_cast<int>(h.value().row_size());
    Var<T> out = ops::linear(ops::reshape(h, Shape{n, flat}), g.param(*fc_w_), g.param(*fc_b_));
    Var<T> mu = ops::slice_last(out, 0, latent_dim_);
    Var<T> lv = ops::clamp(ops::slice_last(out, latent_dim_, latent_dim_), T(-kLogVarClamp), T(kLogVarClamp));
    return {mu, lv};
  }

 private:
  struct Block {
    int stride;
    Param<T>* k1;
    Param<T>* b1;
    Param<T>* k2;
    Param<T>* b2;
    Param<T>* proj_k;
    Param<T>* proj_b;
  };

  static Block make_block(ParamRegistry<T>& reg, const std::string& p, int cin, int cout, int stride, Rng& rng) {
    Block b{stride, nullptr, nullptr, nullptr, nullptr, nullptr, nullptr};
    b.k1 = reg.add(p + ".conv1.kernel", fan_in_normal<T>(rng, {3, 3, cin, cout}, 9 * cin));
    b.b1 = reg.add(p + ".conv1.bias", Tensor<T>(Shape{cout}));
    b.k2 = reg.add(p + ".conv2.kernel", fan_in_normal<T>(rng, {3, 3, cout, cout}, 9 * cout));
    b.b2 = reg.add(p + ".conv2.bias", Tensor<T>(Shape{cout}));
    if (cin != cout || stride != 1) {
      b.proj_k = reg.add(p + ".proj.kernel", fan_in_normal<T>(rng, {1, 1, cin, cout}, cin));
      b.proj_b = reg.add(p + ".proj.bias", Tensor<T>(Shape{cout}));
    }
    return b;
  }

  int latent_dim_, h_, c_;
  int levels_ = 0;
  std::vector<Block> blocks_;
  Param<T>* fc_w_;
  Param<T>* fc_b_;
};

}  // namespace flowvae
