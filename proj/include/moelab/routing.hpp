#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "moelab/model_config.hpp"

namespace moelab {

struct TopK {
  /// Selected experts, highest logit first; ties go to the lower index.
  std::vector<int> indices;
  /// Softmax over the selected logits only.
  std::vector<double> weights;
};

/// Top-k selection with renormalized softmax weights. ConfigError if k is 0
/// or exceeds the number of logits.
TopK route_topk(std::span<const double> logits, std::size_t k);

/// Routing decisions of one MoE layer for every token of a forward pass,
/// stored flat: selection j of token t lives at index t * k + j.
struct LayerRouting {
  std::size_t tokens = 0;
  std::size_t k = 0;
  std::vector<int> experts;
  std::vector<double> weights;

  std::span<const int> experts_of(std::size_t t) const { return std::span(experts).subspan(t * k, k); }
  std::span<const double> weights_of(std::size_t t) const { return std::span(weights).subspan(t * k, k); }
};

struct RoutingTrace {
  std::size_t n_experts = 0;
  std::vector<LayerRouting> layers;

  bool empty() const noexcept { return layers.empty() || layers.front().tokens == 0; }
};

/// Per-layer routing statistics: f = share of routed selections (sums to 1),
/// P = mean full-softmax routing probability (sums to 1).
struct LayerStats {
  std::size_t tokens = 0;
  std::vector<double> f;
  std::vector<double> P;
};

struct RoutingStats {
  std::size_t n_experts = 0;
  std::vector<LayerStats> layers;
};

/// N_E * sum_i f_i P_i, either averaged over layers (per_layer) or computed
/// once on statistics pooled over all layers (global). ConfigError on empty
/// stats or mode == off.
double load_balancing_loss(const RoutingStats& stats, LbMode mode);

/// dL/dP_i^(layer) for the loss above, treating f as constant.
std::vector<std::vector<double>> load_balancing_grad(const RoutingStats& stats, LbMode mode);

}  // namespace moelab
