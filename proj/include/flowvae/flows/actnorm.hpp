#pragma once

#include <cmath>
#include <string>

#include "flowvae/flows/flow_base.hpp"

namespace flowvae {

/// Per-channel affine normalization y = exp(log_s) ⊙ x + b over the last
/// axis. Works on images [n, h, w, c] and on vectors [n, d].
template <class T>
class Actnorm {
 public:
  Actnorm(ParamRegistry<T>& reg, const std::string& prefix, int channels)
      : log_s_(reg.add(prefix + ".log_s", Tensor<T>(Shape{channels}))),
        bias_(reg.add(prefix + ".bias", Tensor<T>(Shape{channels}))) {}

  int channels() const { return log_s_->value.dim(0); }
  bool initialized() const { return initialized_; }
  void set_initialized(bool v) { initialized_ = v; }
  Param<T>& log_s() { return *log_s_; }
  Param<T>& bias() { return *bias_; }

  /// Sets log_s and b so that `batch` maps to per-channel mean 0, std 1.
  void init_from(const Tensor<T>& batch) {
    const int c = channels();
    if (batch.size() == 0) throw ConfigError("actnorm init on an empty batch");
    if (batch.dim(-1) != c) throw ConfigError("actnorm init: channel mismatch " + shape_str(batch.shape()));
    const std::size_t npos = batch.size() / c;
    for (int k = 0; k < c; ++k) {
      double mean = 0, sq = 0;
      for (std::size_t p = 0; p < npos; ++p) mean += batch[p * c + k];
      mean /= npos;
      for (std::size_t p = 0; p < npos; ++p) {
        const double d = batch[p * c + k] - mean;
        sq += d * d;
      }
      const double sd = std::sqrt(sq / npos);
      if (!(sd > 1e-6)) throw NumericError("actnorm init: channel " + std::to_string(k) + " has zero variance");
      log_s_->value[k] = static_cast<T>(-std::log(sd));
      bias_->value[k] = static_cast<T>(-mean / sd);
    }
    initialized_ = true;
  }

  FlowResult<T> apply(Graph<T>& g, Var<T> x, Direction dir) {
    if (x.dim(-1) != channels()) throw ConfigError("actnorm: channel mismatch " + shape_str(x.shape()));
    if (!initialized_) {
      if (dir == Direction::Forward && g.data_init())
        init_from(x.value());
      else
        throw ConfigError("actnorm used before initialization");
    }
    const int n = x.dim(0);
    const T positions = static_cast<T>(x.value().row_size() / channels());
    Var<T> log_s = g.param(*log_s_);
    Var<T> b = g.param(*bias_);
    Var<T> ld = ops::scale(ops::expand_rows(ops::sum_all(log_s), n), positions);
    if (dir == Direction::Forward) return {ops::channel_affine(x, log_s, b), ld};
    // x = (y − b) · exp(−log_s) = exp(−log_s) ⊙ y + (−b · exp(−log_s)).
    Var<T> neg = ops::scale(log_s, T(-1));
    Var<T> shift = ops::scale(ops::mul(b, ops::exp(neg)), T(-1));
    return {ops::channel_affine(x, neg, shift), ops::scale(ld, T(-1))};
  }

 private:
  Param<T>* log_s_;
  Param<T>* bias_;
  bool initialized_ = false;
};

}  // namespace flowvae
