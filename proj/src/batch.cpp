#include "moelab/batch.hpp"

#include <algorithm>

#include "moelab/error.hpp"

namespace moelab {

std::size_t Batch::total_tokens() const {
  std::size_t n = 0;
  for (std::size_t l : lengths) n += l;
  return n;
}

std::size_t Batch::scored_tokens() const {
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < lengths[b]; ++t) n += scored(b, t);
  }
  return n;
}

Batch make_batch(std::span<const Example* const> examples) {
  if (examples.empty()) throw ConfigError("empty batch");
  Batch out;
  out.batch = examples.size();
  for (const Example* e : examples) {
    if (e->tokens.size() < 2) throw ConfigError("example shorter than two tokens");
    if (e->answer.size() != e->tokens.size()) throw ConfigError("answer mask length mismatch");
    out.seq = std::max(out.seq, e->tokens.size() - 1);
  }
  out.tokens.assign(out.batch * out.seq, 0);
  out.targets.assign(out.batch * out.seq, 0);
  out.loss_mask.assign(out.batch * out.seq, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const Example& e = *examples[b];
    const std::size_t n = e.tokens.size() - 1;
    out.lengths.push_back(n);
    for (std::size_t t = 0; t < n; ++t) {
      out.tokens[b * out.seq + t] = e.tokens[t];
      out.targets[b * out.seq + t] = e.tokens[t + 1];
      out.loss_mask[b * out.seq + t] = e.answer[t + 1];
    }
  }
  return out;
}

Batch make_batch(std::span<const Example> examples) {
  std::vector<const Example*> ptrs;
  ptrs.reserve(examples.size());
  for (const Example& e : examples) ptrs.push_back(&e);
  return make_batch(std::span<const Example* const>(ptrs));
}

}  // namespace moelab
