#pragma once

#include "flowvae/flows/multiscale.hpp"

namespace testutil {

namespace fv = flowvae;

// Fills every trainable parameter with N(0, sd) noise (actnorm included).
template <class T>
void randomize(fv::ParamRegistry<T>& reg, fv::Rng& rng, double sd) {
  for (auto* p : reg.trainable())
    for (auto& v : p->value.values()) v = static_cast<T>(rng.normal() * sd);
}

// Adds N(0, sd) noise on top of the initial values.
template <class T>
void perturb(fv::ParamRegistry<T>& reg, fv::Rng& rng, double sd) {
  for (auto* p : reg.trainable())
    for (auto& v : p->value.values()) v += static_cast<T>(rng.normal() * sd);
}

template <class T>
void mark_initialized(fv::MultiScaleFlow<T>& flow) {
  for (auto* a : flow.actnorms()) a->set_initialized(true);
}

}  // namespace testutil
