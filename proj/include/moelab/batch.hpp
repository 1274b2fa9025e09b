#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace moelab {

/// One training/eval sequence. `answer[i]` marks tokens that are scored.
struct Example {
  std::vector<int> tokens;
  std::vector<std::uint8_t> answer;

  bool operator==(const Example&) const = default;
};

/// Padded next-token batch. Row b holds `lengths[b]` valid input positions;
/// targets and loss_mask are meaningful only there. Padding is never run
/// through the model.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
  std::vector<std::size_t> lengths;

  int token(std::size_t b, std::size_t t) const { return tokens[b * seq + t]; }
  int target(std::size_t b, std::size_t t) const { return targets[b * seq + t]; }
  bool scored(std::size_t b, std::size_t t) const { return loss_mask[b * seq + t] != 0; }
  std::size_t total_tokens() const;
  std::size_t scored_tokens() const;
};

/// Shifts each example by one position: input = tokens[0..n-1),
/// target = tokens[1..n), loss mask = answer[1..n).
Batch make_batch(std::span<const Example> examples);
Batch make_batch(std::span<const Example* const> examples);

}  // namespace moelab
