#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moelab/adapters.hpp"
#include "moelab/model.hpp"
#include "moelab/plan.hpp"
#include "moelab/routing.hpp"

namespace moelab {

/// Coarse adapter-target family: attention, gate, expert, shared.
std::string target_group(const std::string& target);

struct TargetParams {
  std::string target;
  std::string group;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::size_t rank = 0;
  std::uint64_t trainable = 0;
};

struct ParamReport {
  std::uint64_t base_total = 0;       // every non-adapter parameter
  std::uint64_t adapter_total = 0;    // A and B entries (masks excluded)
  std::uint64_t trainable = 0;        // trainable coordinates (mask popcount for masked B)
  double fraction = 0.0;              // trainable / base_total
  std::map<std::string, std::uint64_t> per_group;
  std::vector<TargetParams> per_target;
};

/// Registry enumeration of trainable coordinates.
ParamReport count_params(const MoEModel& model);

/// Closed form for an adapter configuration on `config`, without building a
/// model: Σ r(d_in + d_out) (lora), Σ r·d_out (lori_d), Σ ⌈ρ·r·d_out⌉ (lori_s).
/// Per-group totals go to `per_group` when given.
std::uint64_t closed_form_trainable(const ModelConfig& config, const TargetSet& targets, const PlacementPlan* plan,
                                    const Scheme& scheme, std::size_t rank,
                                    std::map<std::string, std::uint64_t>* per_group = nullptr);

/// Hot-expert hits against routed selections for one trace.
struct ExecCounters {
  std::vector<std::uint64_t> hits;       // per layer: selections landing on plan members
  std::vector<std::uint64_t> activated;  // per layer: all selections
  double hit_rate() const;
};

ExecCounters exec_counters(const RoutingTrace& trace, const PlacementPlan& plan);

/// Adapter-only cost of one forward pass. One multiply-accumulate counts as
/// 2 FLOPs, so one adapter execution on one token costs 2·r·(d_in + d_out).
struct FlopsReport {
  std::uint64_t tokens = 0;
  std::uint64_t forward = 0;
  std::uint64_t train = 0;  // 3 × forward
  std::uint64_t attention_forward = 0;
  std::uint64_t gate_forward = 0;
  std::uint64_t expert_forward = 0;  // routed experts
  std::uint64_t shared_forward = 0;
  std::vector<std::uint64_t> executions_per_layer;
  /// The same trace costed with every routed expert adapted.
  std::uint64_t baseline_forward = 0;
  std::uint64_t baseline_expert_forward = 0;
  double reduction_pct = 0.0;         // total adapter FLOPs vs baseline
  double expert_reduction_pct = 0.0;  // routed-expert adapter FLOPs vs baseline
};

/// Traced adapter FLOPs. ConfigError when the trace does not match the model.
FlopsReport adapter_flops(const RoutingTrace& trace, const MoEModel& model);

/// Sums two reports over disjoint traces (recomputing the percentages).
FlopsReport accumulate(const FlopsReport& a, const FlopsReport& b);

}  // namespace moelab
