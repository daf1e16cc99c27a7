#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flowvae/checkpoint.hpp"
#include "flowvae/dataset.hpp"
#include "flowvae/model.hpp"

namespace flowvae {

/// Linear warmup to the initial rate, then exponential decay.
inline double lr_at(std::int64_t update, const TrainConfig& cfg) {
  if (update < 0) throw ConfigError("update must be >= 0");
  if (update < cfg.warmup) return cfg.lr * static_cast<double>(update + 1) / cfg.warmup;
  return cfg.lr * std::pow(cfg.decay, static_cast<double>(update - cfg.warmup));
}

/// One bias-corrected Adam step with decoupled weight decay
/// (value ← value·(1 − lr·wd) before the step); `step` counts from 1.
/// Returns false and leaves everything untouched if any gradient is
/// non-finite.
template <class T>
bool adam_update(const std::vector<Param<T>*>& params, AdamState<T>& state, double lr, std::int64_t step,
                 const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ConfigError("adam state does not match parameters");
  for (auto* p : params)
    if (!p->grad.all_finite()) {
      ++state.skipped;
      return false;
    }
  const double bc1 = 1 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1 - std::pow(cfg.beta2, static_cast<double>(step));
  const T shrink = static_cast<T>(1 - lr * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k]->value;
    const auto& grad = params[k]->grad;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double m_hat = m[i] / bc1, v_hat = v[i] / bc2;
      value[i] = value[i] * shrink - static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
    }
  }
  return true;
}

/// Dequantized (and optionally augmented) batch of the given images.
template <class T>
Tensor<T> make_batch(const Dataset& d, std::span<const int> indices, Rng& rng, bool flip = false, bool crop = false) {
  const int n = static_cast<int>(indices.size());
  const Shape shape{n, d.height, d.width, d.channels};
  std::vector<std::uint8_t> px;
  px.reserve(static_cast<std::size_t>(n) * d.image_size());
  for (int i : indices) {
    if (flip || crop) {
      auto a = augment(d.image(i), d.height, d.width, d.channels, flip, crop, rng);
      px.insert(px.end(), a.begin(), a.end());
    } else {
      auto im = d.image(i);
      px.insert(px.end(), im.begin(), im.end());
    }
  }
  return dequantize<T>(px, shape, d.bits, rng);
}

/// Mean single-sample ELBO bound over a dataset, in bits per dimension.
/// Deterministic given `seed`.
template <class T>
double evaluate_bpd(Model<T>& model, const Dataset& d, std::uint64_t seed, int batch_size = 128) {
  check_dataset(d, model.config());
  Rng rng(seed);
  double total = 0;
  std::vector<int> idx;
  for (int begin = 0; begin < d.size(); begin += batch_size) {
    const int n = std::min(batch_size, d.size() - begin);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), begin);
    Tensor<T> x = make_batch<T>(d, idx, rng);
    Graph<T> g(false);
    for (T v : model.elbo(g, g.constant(x), rng).loss.value().values()) total += v;
  }
  const double nats = total / d.size();
  if (!std::isfinite(nats)) throw NumericError("evaluation produced a non-finite bound");
  return bits_per_dim(nats, model.dims(), d.bits);
}

/// Expected bpd on `eval` of a per-dimension Gaussian fitted to the
/// dequantized `train` data. Moments of x = (y + u)/2^b are exact:
/// E x = (E y + ½)/2^b, Var x = (Var y + 1/12)/4^b.
inline double gaussian_baseline_bpd(const Dataset& train, const Dataset& eval) {
  const std::size_t dims = train.image_size();
  if (train.size() == 0 || eval.size() == 0 || eval.image_size() != dims) throw ConfigError("bad baseline datasets");
  const double scale = std::ldexp(1.0, train.bits);
  std::vector<double> mean(dims, 0.0), var(dims, 0.0);
  for (int i = 0; i < train.size(); ++i) {
    auto px = train.image(i);
    for (std::size_t j = 0; j < dims; ++j) mean[j] += px[j];
  }
  for (auto& m : mean) m /= train.size();
  for (int i = 0; i < train.size(); ++i) {
    auto px = train.image(i);
    for (std::size_t j = 0; j < dims; ++j) var[j] += (px[j] - mean[j]) * (px[j] - mean[j]);
  }
  double nats = 0;
  for (std::size_t j = 0; j < dims; ++j) {
    const double mu = (mean[j] + 0.5) / scale;
    const double v = (var[j] / train.size() + 1.0 / 12) / (scale * scale);
    double sq = 0;  // E over eval images and u of (x − mu)²
    for (int i = 0; i < eval.size(); ++i) {
      const double centre = (eval.image(i)[j] + 0.5) / scale - mu;
      sq += centre * centre + 1.0 / (12 * scale * scale);
    }
    sq /= eval.size();
    nats += 0.5 * std::log(2 * std::numbers::pi * v) + sq / (2 * v);
  }
  return bits_per_dim(nats, static_cast<int>(dims), train.bits);
}

/// One row of the metrics log.
struct StepMetrics {
  std::int64_t update = 0;
  double loss = 0;
  double recon = 0;
  double kl = 0;
  double bpd = 0;
  double lr = 0;
};

inline constexpr const char* kMetricsHeader = "update,loss,recon,kl,bpd,lr";
inline constexpr int kMaxNonfiniteStreak = 10;

/// Runs the optimization: data-dependent init on the first batch, then one
/// Adam step per mini-batch. Every random draw (batch order, augmentation,
/// dequantization, posterior noise) comes from one Rng whose state is
/// checkpointed, so a resumed run continues the same trajectory.
template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, const TrainConfig& cfg, const Dataset& data)
      : model_(model), cfg_(cfg), data_(data), rng_(cfg.seed) {
    cfg_.validate();
    check_dataset(data_, model_.config());
    if (data_.bits != model_.config().bits) throw ConfigError("dataset bit depth differs from model bits");
    if (data_.size() < cfg_.batch_size) throw ConfigError("dataset smaller than one batch");
    adam_.reset(model_.params().trainable());
  }

  std::int64_t update() const { return progress_.update; }
  const AdamState<T>& adam() const { return adam_; }
  Rng& rng() { return rng_; }

  TrainProgress progress() const {
    TrainProgress p = progress_;
    p.rng_state = rng_.state();
    return p;
  }

  void save(const std::string& path) { save_checkpoint(path, model_, &adam_, progress()); }

  void resume(const std::string& path) {
    progress_ = load_checkpoint(path, model_, &adam_);
    rng_.set_state(progress_.rng_state);
  }

  /// Performs one update. Non-finite losses skip the update; more than
  /// kMaxNonfiniteStreak in a row raise NumericError.
  StepMetrics step() {
    std::vector<int> idx = batch_indices(progress_.update);
    Tensor<T> x = make_batch<T>(data_, idx, rng_, cfg_.flip, cfg_.crop);
    if (!model_.initialized()) model_.initialize(x, rng_);

    StepMetrics out;
    out.update = progress_.update;
    out.lr = lr_at(progress_.update, cfg_);
    model_.params().zero_grad();
    // Posterior noise is drawn before the forward pass so a failed pass
    // consumes the same random numbers as a successful one.
    Tensor<T> noise = rng_.normal_tensor<T>({x.dim(0), model_.latent_dim()});
    try {
      Graph<T> g(true);
      ElboTerms<T> terms = model_.elbo(g, g.constant(x), g.constant(noise));
      Var<T> loss = ops::mean_all(terms.loss);
      out.loss = loss.value()[0];
      out.recon = ops::mean_all(terms.recon).value()[0];
      out.kl = ops::mean_all(terms.kl).value()[0];
      if (std::isfinite(out.loss)) g.backward(loss);
    } catch (const NumericError&) {
      out.loss = out.recon = out.kl = std::numeric_limits<double>::quiet_NaN();
    }
    out.bpd = bits_per_dim(out.loss, model_.dims(), model_.config().bits);
    if (!std::isfinite(out.loss)) {
      if (++progress_.nonfinite_streak > kMaxNonfiniteStreak)
        throw NumericError("loss non-finite for more than " + std::to_string(kMaxNonfiniteStreak) + " updates");
    } else {
      progress_.nonfinite_streak = 0;
      adam_update(model_.params().trainable(), adam_, out.lr, progress_.update + 1, cfg_);
    }
    ++progress_.update;
    return out;
  }

  /// Steps until cfg.max_updates, appending to `out_dir`/metrics.csv and
  /// writing `out_dir`/ckpt_<update>.bin every cfg.checkpoint_every updates
  /// plus `out_dir`/final.ckpt at the end.
  void run(const std::string& out_dir, const std::function<void(const StepMetrics&)>& on_step = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const fs::path csv_path = fs::path(out_dir) / "metrics.csv";
    const bool fresh = progress_.update == 0 || !fs::exists(csv_path);
    std::ofstream csv(csv_path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    if (fresh) csv << kMetricsHeader << '\n';
    csv << std::setprecision(9);
    while (progress_.update < cfg_.max_updates) {
      StepMetrics m = step();
      csv << m.update << ',' << m.loss << ',' << m.recon << ',' << m.kl << ',' << m.bpd << ',' << m.lr << '\n';
      if (on_step) on_step(m);
      if (progress_.update % cfg_.checkpoint_every == 0) {
        std::ostringstream name;
        name << "ckpt_" << std::setw(7) << std::setfill('0') << progress_.update << ".bin";
        csv.flush();
        save((fs::path(out_dir) / name.str()).string());
      }
    }
    if (!model_.initialized()) {
      std::vector<int> idx = batch_indices(0);
      model_.initialize(make_batch<T>(data_, idx, rng_), rng_);
    }
    save((fs::path(out_dir) / "final.ckpt").string());
    if (!csv) throw IoError("write failed: " + csv_path.string());
  }

 private:
  // Batch `u` is slice u mod B of a per-epoch permutation seeded by
  // (seed, epoch); the final partial batch of an epoch is dropped.
  std::vector<int> batch_indices(std::int64_t u) const {
    const int per_epoch = data_.size() / cfg_.batch_size;
    const std::int64_t epoch = u / per_epoch;
    const int pos = static_cast<int>(u % per_epoch);
    std::vector<int> perm(data_.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng order(cfg_.seed ^ (0xd1b54a32d192ed03ull * static_cast<std::uint64_t>(epoch + 1)));
    order.shuffle(perm.begin(), perm.end());
    return {perm.begin() + pos * cfg_.batch_size, perm.begin() + (pos + 1) * cfg_.batch_size};
  }

  Model<T>& model_;
  TrainConfig cfg_;
  const Dataset& data_;
  Rng rng_;
  AdamState<T> adam_;
  TrainProgress progress_;
};

}  // namespace flowvae
