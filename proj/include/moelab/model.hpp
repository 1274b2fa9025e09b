#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "moelab/batch.hpp"
#include "moelab/model_config.hpp"
#include "moelab/registry.hpp"
#include "moelab/routing.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Low-rank update attached to one Linear: h = xW + scale * xA(B ⊙ M).
struct Adapter {
  ParamId a = 0;
  ParamId b = 0;
  std::optional<ParamId> mask;
  std::size_t rank = 0;
  double scale = 1.0;
};

/// Bias-free linear map y = xW with W stored d_in x d_out.
struct Linear {
  std::string target;  // e.g. "layer0.attn.q", "layer2.expert5.up"
  ParamId weight = 0;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::optional<Adapter> adapter;
};

struct ExpertFFN {
  Linear up;
  Linear down;
};

struct MoEBlock {
  Linear q, k, v, o;
  Linear router;
  std::vector<ExpertFFN> experts;
  std::vector<ExpertFFN> shared;
};

/// Gradient accumulators aligned with a registry; allocated only for
/// trainable entries so concurrent writers never share a buffer.
class GradBuffer {
 public:
  explicit GradBuffer(const ParamRegistry& registry);
  bool wants(ParamId id) const { return id < grads_.size() && grads_[id].has_value(); }
  Tensor& at(ParamId id) { return *grads_[id]; }
  /// Masks are applied here, so masked-out coordinates are exactly zero.
  GradMap to_map(const ParamRegistry& registry) const;

 private:
  std::vector<std::optional<Tensor>> grads_;
};

// Activations saved by the forward pass for the backward pass.
struct LinearCache {
  Tensor x;
  Tensor xa;     // x A, when an adapter is attached
  Tensor b_eff;  // B ⊙ M
};

struct NormCache {
  Tensor x;
  std::vector<double> inv_rms;
};

struct AttentionCache {
  LinearCache q, k, v, o;
  Tensor qm, km, vm, ctx;
  std::vector<Tensor> probs;  // one (len x len) block per (sequence, head)
};

struct ExpertCache {
  std::vector<std::size_t> rows;
  LinearCache up, down;
  Tensor pre, act, out;
};

struct MoECache {
  LinearCache router;
  Tensor probs;                    // full softmax, tokens x n_experts
  std::vector<std::size_t> slot;   // row of token t's j-th selection inside its expert
  std::vector<ExpertCache> experts;
  std::vector<ExpertCache> shared;
};

struct BlockCache {
  NormCache norm1;
  AttentionCache attn;
  NormCache norm2;
  MoECache moe;
};

struct ForwardCache {
  std::vector<std::size_t> offsets;  // first flat row of each sequence
  std::vector<BlockCache> blocks;
  NormCache final_norm;
  LinearCache head;
};

struct ForwardResult {
  Tensor logits;  // flat valid positions x vocab
  RoutingTrace trace;
  RoutingStats stats;
  double ce = 0.0;
  double lb = 0.0;
  double loss = 0.0;
  std::size_t scored = 0;
};

struct LossSpec {
  bool include_lb = true;
  LbMode lb_mode = LbMode::global;
  double lb_weight = 0.01;
};

/// Pre-norm transformer whose every block is attention followed by a top-k
/// routed MoE FFN (plus optional always-on shared experts).
class MoEModel {
 public:
  MoEModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParamRegistry& params() noexcept { return params_; }
  const ParamRegistry& params() const noexcept { return params_; }
  std::vector<MoEBlock>& blocks() noexcept { return blocks_; }
  const std::vector<MoEBlock>& blocks() const noexcept { return blocks_; }
  const Linear& head() const noexcept { return head_; }

  /// Loss settings implied by the model config (lb on unless lb_mode == off).
  LossSpec default_loss() const;

  /// Adapter-eligible linears in canonical order: per layer q,k,v,o, router,
  /// routed experts (up, down), shared experts (up, down).
  void for_each_linear(const std::function<void(Linear&)>& fn);
  void for_each_linear(const std::function<void(const Linear&)>& fn) const;
  Linear* find_linear(const std::string& target);

  ForwardResult forward(const Batch& batch, const LossSpec& loss, ForwardCache* cache = nullptr) const;

  /// Reverse pass from dL/dlogits plus the load-balancing path.
  void backward(const Batch& batch, const ForwardResult& fwd, const ForwardCache& cache, const Tensor& dlogits,
                const LossSpec& loss, GradBuffer& grads) const;

 private:
  ModelConfig config_;
  ParamRegistry params_;
  ParamId tok_embed_ = 0;
  ParamId pos_embed_ = 0;
  std::vector<MoEBlock> blocks_;
  Linear head_;
};

struct LossAndGrads {
  double loss = 0.0;
  GradMap grads;
  RoutingTrace trace;
};

/// Loss plus gradients for exactly the trainable parameters (masked
/// coordinates zero). NumericalError names the layer on NaN/Inf.
LossAndGrads forward_backward(const MoEModel& model, const Batch& batch, const LossSpec& loss);

/// Loss only (no caches kept).
double lm_loss(const MoEModel& model, const Batch& batch, const LossSpec& loss);

// Building blocks, exposed for tests and the adapters module.
Tensor linear_forward(const ParamRegistry& params, const Linear& lin, const Tensor& x, LinearCache* cache);
Tensor linear_backward(const ParamRegistry& params, const Linear& lin, const LinearCache& cache, const Tensor& dy,
                       GradBuffer& grads);

/// Naming helpers for canonical parameter names.
std::string layer_prefix(std::size_t layer);
std::string expert_target(std::size_t layer, std::size_t expert, bool up);
std::string shared_target(std::size_t layer, std::size_t expert, bool up);

}  // namespace moelab
