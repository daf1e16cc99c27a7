#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>

#include "flowvae/flows/actnorm.hpp"
#include "flowvae/flows/coupling.hpp"
#include "flowvae/flows/invconv.hpp"

namespace flowvae {

/// Coupling order inside one step.
inline constexpr std::array<SplitPattern, 4> kStepPatterns = {SplitPattern::ContinuousAB, SplitPattern::AlternateAB,
                                                              SplitPattern::ContinuousBA, SplitPattern::AlternateBA};

/// actnorm → invertible 1×1 conv → four couplings, one per split pattern.
template <class T>
class FlowStep {
 public:
  FlowStep(ParamRegistry<T>& reg, const std::string& prefix, const CouplingOptions<T>& opt, Rng& rng)
      : actnorm_(reg, prefix + ".actnorm", opt.channels),
        invconv_(reg, prefix + ".invconv", opt.channels, InvConv<T>::Init::RandomOrthogonal, rng) {
    for (std::size_t i = 0; i < kStepPatterns.size(); ++i)
      couplings_[i] = std::make_unique<Coupling<T>>(reg, prefix + ".coupling" + std::to_string(i), opt,
                                                    kStepPatterns[i], rng);
  }

  Actnorm<T>& actnorm() { return actnorm_; }
  InvConv<T>& invconv() { return invconv_; }
  Coupling<T>& coupling(int i) { return *couplings_.at(i); }

  FlowResult<T> apply(Graph<T>& g, Var<T> x, std::optional<Var<T>> z, Direction dir) {
    if (dir == Direction::Forward) {
      FlowResult<T> r = actnorm_.apply(g, x, dir);
      Var<T> ld = r.logdet;
      r = invconv_.apply(g, r.y, dir);
      ld = ops::add(ld, r.logdet);
      for (auto& c : couplings_) {
        r = c->apply(g, r.y, z, dir);
        ld = ops::add(ld, r.logdet);
      }
      return {r.y, ld};
    }
    Var<T> y = x;
    Var<T> ld = zero_logdet(g, x.dim(0));
    for (auto it = couplings_.rbegin(); it != couplings_.rend(); ++it) {
      FlowResult<T> r = (*it)->apply(g, y, z, dir);
      y = r.y;
      ld = ops::add(ld, r.logdet);
    }
    FlowResult<T> r = invconv_.apply(g, y, dir);
    ld = ops::add(ld, r.logdet);
    r = actnorm_.apply(g, r.y, dir);
    return {r.y, ops::add(ld, r.logdet)};
  }

 private:
  Actnorm<T> actnorm_;
  InvConv<T> invconv_;
  std::array<std::unique_ptr<Coupling<T>>, 4> couplings_;
};

}  // namespace flowvae
