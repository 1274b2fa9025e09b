#include "moelab/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/error.hpp"

namespace moelab {

std::string to_string(LbMode mode) {
  switch (mode) {
    case LbMode::global:
      return "global";
    case LbMode::per_layer:
      return "per_layer";
    case LbMode::off:
      return "off";
  }
  return "off";
}

LbMode parse_lb_mode(const std::string& s) {
  if (s == "global") return LbMode::global;
  if (s == "per_layer") return LbMode::per_layer;
  if (s == "off") return LbMode::off;
  throw ConfigError("unknown lb_mode: " + s);
}

TopK route_topk(std::span<const double> logits, std::size_t k) {
  if (k == 0 || k > logits.size()) {
    throw ConfigError("k_route=" + std::to_string(k) + " invalid for " + std::to_string(logits.size()) + " experts");
  }
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [&](int a, int b) {
    const double la = logits[static_cast<std::size_t>(a)];
    const double lb = logits[static_cast<std::size_t>(b)];
    return la > lb || (la == lb && a < b);
  });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  out.weights.resize(k);
  const double top = logits[static_cast<std::size_t>(out.indices[0])];
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    out.weights[j] = std::exp(logits[static_cast<std::size_t>(out.indices[j])] - top);
    z += out.weights[j];
  }
  for (double& w : out.weights) w /= z;
  return out;
}

namespace {

void check_stats(const RoutingStats& stats, LbMode mode) {
  if (mode == LbMode::off) throw ConfigError("load-balancing loss requested with lb_mode=off");
  if (stats.layers.empty()) throw ConfigError("load-balancing loss on empty routing stats");
  for (const LayerStats& l : stats.layers) {
    if (l.f.size() != stats.n_experts || l.P.size() != stats.n_experts) {
      throw ConfigError("routing stats width does not match n_experts");
    }
  }
}

}  // namespace

double load_balancing_loss(const RoutingStats& stats, LbMode mode) {
  check_stats(stats, mode);
  const std::size_t ne = stats.n_experts;
  const double n_layers = static_cast<double>(stats.layers.size());
  if (mode == LbMode::per_layer) {
    double total = 0.0;
    for (const LayerStats& l : stats.layers) {
      double s = 0.0;
      for (std::size_t i = 0; i < ne; ++i) s += l.f[i] * l.P[i];
      total += static_cast<double>(ne) * s;
    }
    return total / n_layers;
  }
  // Pool f and P over layers, then apply the formula once.
  double s = 0.0;
  for (std::size_t i = 0; i < ne; ++i) {
    double f = 0.0, p = 0.0;
    for (const LayerStats& l : stats.layers) {
      f += l.f[i];
      p += l.P[i];
    }
    s += (f / n_layers) * (p / n_layers);
  }
  return static_cast<double>(ne) * s;
}

std::vector<std::vector<double>> load_balancing_grad(const RoutingStats& stats, LbMode mode) {
  check_stats(stats, mode);
  const std::size_t ne = stats.n_experts;
  const double n_layers = static_cast<double>(stats.layers.size());
  std::vector<std::vector<double>> grad(stats.layers.size(), std::vector<double>(ne, 0.0));
  if (mode == LbMode::per_layer) {
    for (std::size_t l = 0; l < stats.layers.size(); ++l) {
      for (std::size_t i = 0; i < ne; ++i) grad[l][i] = static_cast<double>(ne) * stats.layers[l].f[i] / n_layers;
    }
    return grad;
  }
  for (std::size_t i = 0; i < ne; ++i) {
    double f = 0.0;
    for (const LayerStats& l : stats.layers) f += l.f[i];
    const double g = static_cast<double>(ne) * (f / n_layers) / n_layers;
    for (std::size_t l = 0; l < stats.layers.size(); ++l) grad[l][i] = g;
  }
  return grad;
}

}  // namespace moelab
