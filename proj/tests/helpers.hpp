#pragma once

#include <cstdint>
#include <vector>

#include "moelab/batch.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_experts = 4;
  c.k_route = 2;
  c.vocab = 32;
  c.max_seq = 16;
  return c;
}

/// Random sequences with random score masks (at least one scored target).
inline std::vector<Example> random_examples(std::uint64_t seed, std::size_t n, std::size_t min_len,
                                            std::size_t max_len, int vocab) {
  Rng rng(seed);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    const auto len = std::size_t(rng.uniform_int(std::int64_t(min_len), std::int64_t(max_len)));
    for (std::size_t t = 0; t < len; ++t) {
      e.tokens.push_back(int(rng.uniform_int(0, vocab - 1)));
      e.answer.push_back(std::uint8_t(rng.uniform_int(0, 1)));
    }
    e.answer.back() = 1;
    out.push_back(std::move(e));
  }
  return out;
}

inline Tensor random_tensor(std::uint64_t seed, Shape shape, double stddev = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

}  // namespace moelab::testing
