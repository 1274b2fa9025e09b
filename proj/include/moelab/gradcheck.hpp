#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "moelab/batch.hpp"
#include "moelab/model.hpp"
#include "moelab/registry.hpp"

namespace moelab {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates checked per parameter group; groups with fewer are checked
  /// exhaustively. 0 means exhaustive everywhere.
  std::size_t max_per_group = 0;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error. Central differences on an O(1)
  /// loss carry ~1e-10 absolute roundoff at eps = 1e-5, so smaller gradients
  /// are compared in absolute terms against this scale.
  double abs_floor = 1e-5;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because the perturbation changed a discrete
  /// routing decision (the loss is not differentiable there).
  std::size_t skipped_kinks = 0;
  std::map<std::string, double> group_max;
  std::map<std::string, std::size_t> group_checked;
};

/// Coarse parameter family used for sampling and reporting: embed,
/// attention, router, expert, shared, head, adapter_A, adapter_B.
std::string param_group(const std::string& name);

/// Evaluation hook: returns the loss and a signature of any discrete choices
/// made on the way (0 for smooth models).
using LossProbe = std::function<std::pair<double, std::uint64_t>()>;

/// Central differences (f(θ+ε) − f(θ−ε)) / 2ε against `analytic`, relative
/// error |g − ĝ| / max(|g|, |ĝ|, abs_floor). Only trainable, unmasked coordinates are
/// perturbed; every value is restored bit-exactly.
GradCheckResult finite_diff_check(ParamRegistry& registry, const GradMap& analytic, const LossProbe& probe,
                                  const GradCheckOptions& options);

/// The same check on a model/batch, with routing-flip detection.
GradCheckResult finite_diff_check(MoEModel& model, const Batch& batch, const LossSpec& loss,
                                  const GradCheckOptions& options);

}  // namespace moelab
