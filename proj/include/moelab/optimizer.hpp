#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "moelab/registry.hpp"

namespace moelab {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled (AdamW-style) weight decay.
  double weight_decay = 0.0;
};

struct OptimizerState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;

  explicit OptimizerState(AdamHyper h = {}) : hyper(h) {}
};

/// One Adam step over the parameters named in `grads`.
///
/// Every key must name a trainable entry with a matching shape, otherwise
/// ConfigError. For masked entries only mask-support coordinates move (the
/// others keep their exact bits, moments included). Frozen entries are never
/// touched. The step counter advances by exactly one per call.
void adam_step(ParamRegistry& registry, const GradMap& grads, OptimizerState& state);

}  // namespace moelab
