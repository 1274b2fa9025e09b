#include "moelab/optimizer.hpp"

#include <cmath>

#include "moelab/error.hpp"

namespace moelab {

void adam_step(ParamRegistry& registry, const GradMap& grads, OptimizerState& state) {
  // Validate everything before mutating anything.
  for (const auto& [name, g] : grads) {
    const auto id = registry.find(name);
    if (!id) throw ConfigError("gradient for unknown parameter: " + name);
    const ParamEntry& e = registry.entry(*id);
    if (!e.trainable) throw ConfigError("gradient for frozen parameter: " + name);
    if (g.shape() != e.value.shape()) {
      throw ConfigError("gradient shape " + shape_to_string(g.shape()) + " does not match " + name + " " +
                        shape_to_string(e.value.shape()));
    }
  }

  const AdamHyper& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(h.beta1, t);
  const double bias2 = 1.0 - std::pow(h.beta2, t);

  for (const auto& [name, g] : grads) {
    ParamEntry& e = registry.entry(name);
    auto [mit, m_new] = state.first_moment.try_emplace(name, Tensor::zeros(g.shape()));
    auto [vit, v_new] = state.second_moment.try_emplace(name, Tensor::zeros(g.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    double* p = e.value.data();
    const double* mask = e.mask ? e.mask->data() : nullptr;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (mask && mask[i] == 0.0) continue;
      const double gi = g[i];
      if (h.weight_decay != 0.0) p[i] -= h.lr * h.weight_decay * p[i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
    }
  }
}

}  // namespace moelab
