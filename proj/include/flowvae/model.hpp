#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowvae/config.hpp"
#include "flowvae/encoder.hpp"
#include "flowvae/flows/multiscale.hpp"
#include "flowvae/prior.hpp"

namespace flowvae {

/// x = (y + u) / 2^bits for integer pixels y and uniform noise u ∈ [0, 1).
template <class T>
Tensor<T> dequantize(std::span<const std::uint8_t> pixels, const Shape& shape, int bits, const Tensor<T>& noise) {
  if (shape_size(shape) != pixels.size() || noise.size() != pixels.size())
    throw ConfigError("dequantize: size mismatch");
  const int levels = 1 << bits;
  const T below_one = std::nextafter(T(1), T(0));
  Tensor<T> x(shape);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] >= levels) throw ConfigError("dequantize: pixel value out of range for " + std::to_string(bits) + " bits");
    x[i] = std::min((static_cast<T>(pixels[i]) + noise[i]) / static_cast<T>(levels), below_one);
  }
  return x;
}

template <class T>
Tensor<T> dequantize(std::span<const std::uint8_t> pixels, const Shape& shape, int bits, Rng& rng) {
  return dequantize(pixels, shape, bits, rng.uniform_tensor<T>(shape));
}

/// floor(x · 2^bits) clamped to [0, 2^bits − 1].
template <class T>
std::vector<std::uint8_t> quantize(const Tensor<T>& x, int bits) {
  const int top = (1 << bits) - 1;
  std::vector<std::uint8_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::floor(static_cast<double>(x[i]) * (1 << bits));
    out[i] = static_cast<std::uint8_t>(std::isfinite(v) ? std::clamp(v, 0.0, double(top)) : 0.0);
  }
  return out;
}

/// Discrete negative log-likelihood bound in bits per dimension for a
/// continuous density over [0, 1)^dims.
inline double bits_per_dim(double nats, int dims, int bits) {
  return nats / (dims * std::numbers::ln2) + bits;
}

/// Batched (z, υ): z[n, d_z], υ[n, h·w·c].
template <class T>
struct LatentPair {
  Tensor<T> z;
  Tensor<T> upsilon;
};

/// Per-example ELBO terms in nats, each [n]; loss = recon + kl.
template <class T>
struct ElboTerms {
  Var<T> loss;
  Var<T> recon;
  Var<T> kl;
};

/// VAE with a flow prior over the global code z and a conditional multi-scale
/// flow decoder x ↔ υ. Images are [n, h, w, c] tensors in [0, 1).
template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    encoder_.emplace(reg_, "encoder", cfg_, rng_);
    prior_.emplace(reg_, "prior", cfg_.latent_dim, cfg_.prior_steps, cfg_.prior_width(), T(cfg_.alpha), rng_);
    CouplingOptions<T> opt;
    opt.hidden = cfg_.hidden;
    opt.alpha = T(cfg_.alpha);
    opt.affine = cfg_.affine;
    opt.cond_dim = conditions_couplings() ? cfg_.latent_dim : 0;
    decoder_.emplace(reg_, "decoder", MultiScaleSpec{cfg_.levels, cfg_.steps, cfg_.subblocks}, cfg_.height,
                     cfg_.width, cfg_.channels, opt, rng_);
    if (!conditions_couplings()) {
      base_w_ = reg_.add("base.weight", Tensor<T>(Shape{cfg_.latent_dim, 2 * dims()}));
      base_b_ = reg_.add("base.bias", Tensor<T>(Shape{2 * dims()}));
    }
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<T>& params() { return reg_; }
  const ParamRegistry<T>& params() const { return reg_; }
  Encoder<T>& encoder() { return *encoder_; }
  PriorFlow<T>& prior() { return *prior_; }
  MultiScaleFlow<T>& decoder() { return *decoder_; }
  int dims() const { return cfg_.dims(); }
  int latent_dim() const { return cfg_.latent_dim; }
  Shape image_shape(int n) const { return {n, cfg_.height, cfg_.width, cfg_.channels}; }
  bool conditions_couplings() const { return cfg_.cond_mode == "coupling"; }

  bool initialized() {
    for (auto* a : decoder_->actnorms())
      if (!a->initialized()) return false;
    return true;
  }
  void set_initialized(bool on) {
    for (auto* a : decoder_->actnorms()) a->set_initialized(on);
  }

  /// Data-dependent actnorm initialization from one batch.
  void initialize(const Tensor<T>& x, Rng& rng) {
    Graph<T> g(false);
    g.set_data_init(true);
    elbo(g, g.constant(x), g.constant(rng.normal_tensor<T>({x.dim(0), latent_dim()})));
  }

  typename Encoder<T>::Posterior posterior(Graph<T>& g, Var<T> x) { return encoder_->encode(g, x); }

  /// −log p(x|z) per example: −[log N(υ; base(z)) + log|det ∂υ/∂x|].
  Var<T> reconstruction_nll(Graph<T>& g, Var<T> x, Var<T> z) {
    FlowResult<T> fwd = decoder_->forward(g, ops::add_scalar(x, T(-0.5)), cond(z));
    return ops::scale(ops::add(base_log_prob(g, fwd.y, z), fwd.logdet), T(-1));
  }

  /// Single-sample reparameterized ELBO with posterior noise ε: z = μ + σ ⊙ ε.
  ElboTerms<T> elbo(Graph<T>& g, Var<T> x, Var<T> noise) {
    auto post = encoder_->encode(g, x);
    Var<T> z = sample_posterior(post.mu, post.log_var, noise);
    Var<T> recon = reconstruction_nll(g, x, z);
    Var<T> kl = ops::sub(log_q(post.mu, post.log_var, z), prior_->log_prob(g, z));
    return {ops::add(recon, kl), recon, kl};
  }

  ElboTerms<T> elbo(Graph<T>& g, Var<T> x, Rng& rng) {
    return elbo(g, x, g.constant(rng.normal_tensor<T>({x.dim(0), latent_dim()})));
  }

  /// (z, υ) per image. z is the posterior mean, or a posterior sample when
  /// `rng` is given.
  LatentPair<T> decouple(const Tensor<T>& x, Rng* rng = nullptr) {
    Graph<T> g(false);
    Var<T> xv = g.constant(x);
    auto post = encoder_->encode(g, xv);
    Var<T> z = post.mu;
    if (rng) z = sample_posterior(post.mu, post.log_var, g.constant(rng->normal_tensor<T>(post.mu.shape())));
    Var<T> ups = decoder_->forward(g, ops::add_scalar(xv, T(-0.5)), cond(z)).y;
    return {z.value(), ups.value()};
  }

  /// x = g(υ, z), the exact inverse of the decoder.
  Tensor<T> generate(const LatentPair<T>& pair) {
    Graph<T> g(false);
    Var<T> z = g.constant(pair.z);
    return ops::add_scalar(decoder_->inverse(g, g.constant(pair.upsilon), cond(z)).y, T(0.5)).value();
  }

  Tensor<T> reconstruct(const Tensor<T>& x) { return generate(decouple(x)); }

  /// z from the prior at `temperature`, υ drawn from its base at the same
  /// temperature, decoded and clamped into [0, 1).
  Tensor<T> sample(int n, T temperature, Rng& rng) {
    if (temperature < T(0)) throw ConfigError("temperature must be >= 0");
    Tensor<T> z = prior_->sample(rng.normal_tensor<T>({n, latent_dim()}), temperature);
    Tensor<T> eps = rng.normal_tensor<T>({n, dims()});
    for (auto& v : eps.values()) v *= temperature;
    Tensor<T> ups = conditions_couplings() ? eps : base_from_standard(z, eps);
    Tensor<T> x = generate({z, ups});
    const T top = std::nextafter(T(1), T(0));
    for (auto& v : x.values()) v = std::isfinite(v) ? std::clamp(v, T(0), top) : T(0);
    return x;
  }

  /// Grid of decodes ((1−α)z₁ + αz₂, (1−β)υ₁ + βυ₂), row-major over α then β;
  /// x1 and x2 are single images [1, h, w, c]. Result is [|α|·|β|, h, w, c].
  Tensor<T> interpolate2d(const Tensor<T>& x1, const Tensor<T>& x2, const std::vector<double>& alphas,
                          const std::vector<double>& betas) {
    if (x1.shape() != x2.shape() || x1.dim(0) != 1) throw ConfigError("interpolate2d expects two single images");
    for (double v : alphas)
      if (v < 0 || v > 1) throw ConfigError("alpha outside [0, 1]");
    for (double v : betas)
      if (v < 0 || v > 1) throw ConfigError("beta outside [0, 1]");
    LatentPair<T> a = decouple(x1), b = decouple(x2);
    const int na = static_cast<int>(alphas.size()), nb = static_cast<int>(betas.size());
    LatentPair<T> grid{Tensor<T>(Shape{na * nb, latent_dim()}), Tensor<T>(Shape{na * nb, dims()})};
    auto mix = [](const Tensor<T>& p, const Tensor<T>& q, double t, T* out) {
      for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<T>((1 - t) * p[i] + t * q[i]);
    };
    for (int i = 0; i < na; ++i)
      for (int j = 0; j < nb; ++j) {
        const int r = i * nb + j;
        mix(a.z, b.z, alphas[i], grid.z.data() + r * latent_dim());
        mix(a.upsilon, b.upsilon, betas[j], grid.upsilon.data() + r * dims());
      }
    return generate(grid);
  }

  /// (g(υ₁, z₂), g(υ₂, z₁)) for batches of equal shape.
  std::pair<Tensor<T>, Tensor<T>> swap_codes(const Tensor<T>& x1, const Tensor<T>& x2) {
    if (x1.shape() != x2.shape()) throw ConfigError("switch expects images of equal shape");
    LatentPair<T> a = decouple(x1), b = decouple(x2);
    return {generate({b.z, a.upsilon}), generate({a.z, b.upsilon})};
  }

 private:
  std::optional<Var<T>> cond(Var<T> z) const {
    return conditions_couplings() ? std::optional<Var<T>>(z) : std::nullopt;
  }

  // log N(υ; m(z), exp(ls(z))²) per example; standard normal in coupling mode.
  Var<T> base_log_prob(Graph<T>& g, Var<T> ups, Var<T> z) {
    if (conditions_couplings()) return ops::std_normal_log_prob(ups);
    Var<T> out = ops::linear(z, g.param(*base_w_), g.param(*base_b_));
    Var<T> mean = ops::slice_last(out, 0, dims());
    Var<T> log_scale = ops::slice_last(out, dims(), dims());
    Var<T> v = ops::mul(ops::sub(ups, mean), ops::exp(ops::scale(log_scale, T(-1))));
    return ops::sub(ops::std_normal_log_prob(v), ops::sum_rows(log_scale));
  }

  Tensor<T> base_from_standard(const Tensor<T>& z, const Tensor<T>& eps) {
    Graph<T> g(false);
    Var<T> out = ops::linear(g.constant(z), g.param(*base_w_), g.param(*base_b_));
    Var<T> mean = ops::slice_last(out, 0, dims());
    Var<T> log_scale = ops::slice_last(out, dims(), dims());
    return ops::add(mean, ops::mul(ops::exp(log_scale), g.constant(eps))).value();
  }

  ModelConfig cfg_;
  Rng rng_;
  ParamRegistry<T> reg_;
  std::optional<Encoder<T>> encoder_;
  std::optional<PriorFlow<T>> prior_;
  std::optional<MultiScaleFlow<T>> decoder_;
  Param<T>* base_w_ = nullptr;
  Param<T>* base_b_ = nullptr;
};

}  // namespace flowvae
