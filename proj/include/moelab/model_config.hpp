#pragma once

#include <cstddef>
#include <string>

namespace moelab {

enum class LbMode { global, per_layer, off };

std::string to_string(LbMode mode);
LbMode parse_lb_mode(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t n_experts = 16;
  std::size_t k_route = 4;
  std::size_t n_shared = 0;
  std::size_t vocab = 32;
  std::size_t max_seq = 16;
  LbMode lb_mode = LbMode::global;
  double lb_weight = 0.01;

  /// Throws ConfigError when the architecture is inconsistent.
  void validate() const;

  /// L=4, d=32, 4 heads, d_ff=64, 16 experts, top-4, no shared experts.
  static ModelConfig desk_default() { return {}; }
  /// Same as the default but with 2 always-on shared experts and top-3 routing.
  static ModelConfig shared_preset() {
    ModelConfig c;
    c.n_shared = 2;
    c.k_route = 3;
    return c;
  }
};

}  // namespace moelab
