#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "moelab/checkpoint.hpp"
#include "moelab/model.hpp"
#include "moelab/plan.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

enum class ExpertTargets { all, plan, none };

/// Which parts of each block receive adapters.
struct TargetSet {
  bool attention = true;
  bool gate = true;
  ExpertTargets experts = ExpertTargets::all;

  /// attention + gate + experts
  static TargetSet all_targets(ExpertTargets e = ExpertTargets::plan) { return {true, true, e}; }
  /// gate + experts
  static TargetSet plus_gate(ExpertTargets e = ExpertTargets::plan) { return {false, true, e}; }
  /// experts only
  static TargetSet pure(ExpertTargets e = ExpertTargets::plan) { return {false, false, e}; }
  static TargetSet attention_only() { return {true, false, ExpertTargets::none}; }

  void validate() const;
  bool operator==(const TargetSet&) const = default;
};

/// "all" | "gate" | "pure" | "attention" (expert placement is given separately).
TargetSet parse_targets(const std::string& s, ExpertTargets experts);
std::string targets_name(const TargetSet& t);

enum class SchemeKind { lora, lori_d, lori_s };

struct Scheme {
  SchemeKind kind = SchemeKind::lora;
  /// Fraction of B entries kept by the sparse variant.
  double density = 0.10;

  bool freezes_a() const noexcept { return kind != SchemeKind::lora; }
  void validate() const;
};

std::string to_string(SchemeKind k);
SchemeKind parse_scheme(const std::string& s);

/// Free-standing copy of one low-rank update.
struct AdapterPair {
  Tensor a;  // d_in x r
  Tensor b;  // r x d_out
  std::optional<Tensor> mask;
  std::size_t rank = 0;
  double alpha = 0.0;
  bool a_frozen = false;

  double scale() const noexcept { return alpha / double(rank); }
};

/// h = xW + (alpha/r) · xA(B ⊙ M), with M = 1 when absent. When B is zero the
/// result has the same bits as xW.
Tensor adapted_forward(const Tensor& x, const Tensor& w, const AdapterPair& adapter);

/// Snapshot of the adapter attached to `lin` (which must have one).
AdapterPair adapter_pair(const MoEModel& model, const Linear& lin, double alpha);

struct AttachOptions {
  TargetSet targets;
  const PlacementPlan* plan = nullptr;
  Scheme scheme;
  std::size_t rank = 4;
  double alpha = 8.0;
  std::uint64_t seed = 0;
};

/// Creates adapters (A ~ N(0, 0.02²), B = 0) on the selected linears:
/// q/k/v/o when targets.attention, the router when targets.gate, and routed
/// experts per targets.experts. Shared experts are adapted whenever
/// targets.experts != none. Experts outside the plan get no adapter objects.
/// Adapter tensors are registered as `<target>.adapter.{A,B}`; the base model
/// is frozen afterwards.
void attach(MoEModel& model, const AttachOptions& options);

/// Mask with the ceil(density · numel) largest-|value| entries of `b_ref` set
/// to 1; ties go to the lower flat index.
Tensor build_mask(const Tensor& b_ref, double density);

/// ceil(density · n), robust to products that land a rounding error above an
/// integer.
std::size_t mask_count(std::size_t n, double density);

/// Installs sparse masks built from a dense-phase adapter snapshot: A is
/// copied from the snapshot, M = build_mask(B_dense), and B restarts at zero.
/// Masks are registered as `<target>.adapter.M`.
void install_sparse_masks(MoEModel& model, const NamedTensors& dense_phase, double density);

/// Freezes the base model and sets adapter trainability for the scheme:
/// lora trains A and B; lori_d trains B only; lori_s trains B on its mask
/// (ConfigError if any adapter lacks one).
ParamRegistry& set_trainability(MoEModel& model, const Scheme& scheme);

bool is_adapter_param(const std::string& name);
/// Registry entries belonging to adapters (A, B and M).
NamedTensors adapter_snapshot(const MoEModel& model);

}  // namespace moelab
