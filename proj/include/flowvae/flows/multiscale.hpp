#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flowvae/flows/flow_step.hpp"

namespace flowvae {

struct MultiScaleSpec {
  int levels = 2;
  int steps = 1;      // K, flow steps per sub-block
  int subblocks = 4;  // M
};

/// Fine-grained multi-scale flow. Each level squeezes 2×2 space into
/// channels, then runs M sub-blocks of K steps. After each of the first M−1
/// sub-blocks the trailing half of the channels is factored out into υ when
/// the current channel count is a multiple of four (so the remaining half
/// stays even). The last level's remainder closes υ, whose length equals
/// h·w·c of the input.
template <class T>
class MultiScaleFlow {
 public:
  struct SubBlock {
    int channels;     // channels entering the sub-block
    bool factor_out;  // whether half is emitted after it
  };
  struct Level {
    int height, width;  // after squeeze
    std::vector<SubBlock> subblocks;
  };

  MultiScaleFlow(ParamRegistry<T>& reg, const std::string& prefix, const MultiScaleSpec& spec, int h, int w, int c,
                 CouplingOptions<T> opt, Rng& rng)
      : spec_(spec), h_(h), w_(w), c_(c) {
    require(spec.levels >= 1 && spec.steps >= 1 && spec.subblocks >= 1, "multiscale: levels/steps/subblocks must be >= 1");
    const int div = 1 << spec.levels;
    if (h % div || w % div)
      throw ConfigError("multiscale: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by 2^" +
                        std::to_string(spec.levels));
    int ch = c, hh = h, ww = w;
    for (int l = 0; l < spec.levels; ++l) {
      hh /= 2;
      ww /= 2;
      ch *= 4;
      Level level{hh, ww, {}};
      for (int m = 0; m < spec.subblocks; ++m) {
        const bool factor = m < spec.subblocks - 1 && ch % 4 == 0;
        level.subblocks.push_back({ch, factor});
        opt.channels = ch;
        std::vector<std::unique_ptr<FlowStep<T>>> block;
        for (int k = 0; k < spec.steps; ++k)
          block.push_back(std::make_unique<FlowStep<T>>(
              reg, prefix + ".l" + std::to_string(l) + ".m" + std::to_string(m) + ".k" + std::to_string(k), opt, rng));
        steps_.push_back(std::move(block));
        if (factor) ch /= 2;
      }
      plan_.push_back(std::move(level));
    }
  }

  const std::vector<Level>& plan() const { return plan_; }
  int dim() const { return h_ * w_ * c_; }

  std::vector<FlowStep<T>*> steps() {
    std::vector<FlowStep<T>*> out;
    for (auto& b : steps_)
      for (auto& s : b) out.push_back(s.get());
    return out;
  }

  std::vector<Actnorm<T>*> actnorms() {
    std::vector<Actnorm<T>*> out;
    for (auto* s : steps()) out.push_back(&s->actnorm());
    return out;
  }

  /// x[n, h, w, c] → (υ[n, h·w·c], logdet[n]).
  FlowResult<T> forward(Graph<T>& g, Var<T> x, std::optional<Var<T>> z) {
    check_input(x);
    const int n = x.dim(0);
    std::vector<Var<T>> parts;
    Var<T> h = x;
    Var<T> ld = zero_logdet(g, n);
    std::size_t b = 0;
    for (std::size_t l = 0; l < plan_.size(); ++l) {
      h = ops::squeeze2(h);
      for (const SubBlock& sb : plan_[l].subblocks) {
        for (auto& step : steps_[b]) {
          FlowResult<T> r = step->apply(g, h, z, Direction::Forward);
          h = r.y;
          ld = ops::add(ld, r.logdet);
        }
        ++b;
        if (sb.factor_out) {
          const int half = sb.channels / 2;
          parts.push_back(ops::slice_last(h, half, half));
          h = ops::slice_last(h, 0, half);
        }
      }
    }
    parts.push_back(h);
    return {ops::concat_rows(parts), ld};
  }

  /// υ[n, h·w·c] → (x[n, h, w, c], logdet of the inverse map).
  FlowResult<T> inverse(Graph<T>& g, Var<T> upsilon, std::optional<Var<T>> z) {
    if (upsilon.value().rank() != 2 || upsilon.dim(1) != dim())
      throw ConfigError("multiscale inverse: latent shape " + shape_str(upsilon.shape()) + ", expected [n," +
                        std::to_string(dim()) + "]");
    const int n = upsilon.dim(0);
    // Offsets of each emitted part, in emission order.
    std::vector<int> offsets;
    int off = 0;
    for (const Level& lv : plan_)
      for (const SubBlock& sb : lv.subblocks)
        if (sb.factor_out) {
          offsets.push_back(off);
          off += lv.height * lv.width * sb.channels / 2;
        }
    const Level& last = plan_.back();
    const int final_c = last.subblocks.back().channels;
    Var<T> h = ops::take_cols(upsilon, off, Shape{n, last.height, last.width, final_c});
    Var<T> ld = zero_logdet(g, n);
    int part = static_cast<int>(offsets.size()) - 1;
    std::size_t b = steps_.size();
    for (int l = static_cast<int>(plan_.size()) - 1; l >= 0; --l) {
      const Level& lv = plan_[l];
      for (int m = static_cast<int>(lv.subblocks.size()) - 1; m >= 0; --m) {
        const SubBlock& sb = lv.subblocks[m];
        --b;
        if (sb.factor_out) {
          const int half = sb.channels / 2;
          Var<T> out = ops::take_cols(upsilon, offsets[part--], Shape{n, lv.height, lv.width, half});
          h = ops::merge_last(h, out, ops::iota_range(0, half), ops::iota_range(half, half));
        }
        for (auto it = steps_[b].rbegin(); it != steps_[b].rend(); ++it) {
          FlowResult<T> r = (*it)->apply(g, h, z, Direction::Inverse);
          h = r.y;
          ld = ops::add(ld, r.logdet);
        }
      }
      h = ops::unsqueeze2(h);
    }
    return {h, ld};
  }

 private:
  void check_input(Var<T> x) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != h_ || s[2] != w_ || s[3] != c_)
      throw ConfigError("multiscale: input " + shape_str(s) + " does not match " + std::to_string(h_) + "x" +
                        std::to_string(w_) + "x" + std::to_string(c_));
  }

  MultiScaleSpec spec_;
  int h_, w_, c_;
  std::vector<Level> plan_;
  std::vector<std::vector<std::unique_ptr<FlowStep<T>>>> steps_;
};

}  // namespace flowvae
