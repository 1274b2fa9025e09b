#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moelab/accounting.hpp"
#include "moelab/adapters.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/gradcheck.hpp"
#include "moelab/model.hpp"
#include "moelab/plan.hpp"
#include "moelab/profiler.hpp"
#include "moelab/table.hpp"
#include "moelab/tasks.hpp"

namespace moelab {

/// Pretrained weights plus the architecture they belong to.
struct BaseModel {
  ModelConfig config;
  NamedTensors weights;
};

/// Reads a checkpoint and checks it against `config`.
BaseModel load_base(const std::filesystem::path& path, const ModelConfig& config);
/// Fresh model carrying the base weights (no adapters).
MoEModel instantiate(const BaseModel& base);

struct RunConfig {
  ModelConfig model;
  std::filesystem::path base_checkpoint;
  TaskSpec task;
  /// Share of the training set used for warm-up profiling, in percent.
  double warmup_pct = 10.0;
  std::size_t k = 4;
  SelectionStrategy strategy = SelectionStrategy::layer_hot;
  TargetSet targets = TargetSet::all_targets(ExpertTargets::plan);
  Scheme scheme;
  std::size_t rank = 4;
  double alpha = 8.0;
  std::size_t epochs = 2;
  std::size_t batch_size = 16;
  double lr = 4e-3;
  std::uint64_t seed = 0;
  /// Keep the load-balancing term during fine-tuning.
  bool lb_finetune = false;
  /// Profile with forward passes of the base model instead of warm-up training.
  bool profile_forward_only = false;
  /// Where run artifacts go; empty keeps everything in memory.
  std::filesystem::path out_dir;

  void validate() const;
};

struct WarmupResult {
  ActivationProfile profile;
  std::size_t subset_size = 0;
  std::size_t steps = 0;
  std::size_t finetune_steps = 0;
  /// steps / finetune_steps
  double overhead = 0.0;
};

/// Trains a throwaway full-target adapter set on a seeded warmup_pct sample
/// of the training data for warmup_pct of the fine-tune step budget, counting
/// routed selections along the way. The adapters are discarded.
WarmupResult run_warmup(const BaseModel& base, const TaskData& data, const RunConfig& cfg);

PlacementPlan build_plan(const ActivationProfile& profile, const RunConfig& cfg);

struct TrainReport {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double base_accuracy = 0.0;
  double accuracy = 0.0;
  ParamReport params;
  std::uint64_t closed_form_trainable = 0;
  FlopsReport flops;
  ExecCounters exec;
  std::optional<PlacementPlan> plan;
  std::optional<ActivationProfile> profile;
  std::size_t warmup_steps = 0;
  double warmup_overhead = 0.0;
  std::size_t cold_experts_checked = 0;
  NamedTensors adapters;

  /// Key/value rendering used for report files.
  Table to_table() const;
};

/// Fresh adapters per plan/targets/scheme on the base model; only adapter
/// parameters step. Cold experts, frozen A and off-mask B are verified
/// bit-exact afterwards (InvariantViolation otherwise). lori_s needs the
/// dense-phase adapters in `dense_phase` (ConfigError when absent).
TrainReport finetune(const BaseModel& base, const TaskData& data, const PlacementPlan* plan, const RunConfig& cfg,
                     const NamedTensors* dense_phase = nullptr);

/// Warm-up, plan and fine-tune (dense phase first for lori_s). Warm-up is
/// skipped when cfg.targets.experts != plan. With cfg.out_dir set, the
/// dense-phase adapters are cached under `<out_dir>/dense_phase` and reused
/// when present, and the report artifacts are written.
TrainReport run_end_to_end(const BaseModel& base, const RunConfig& cfg);

/// report.{csv,md}, adapters.ckpt, and plan.txt / profile.txt / heatmap.csv
/// when the report carries them.
void write_report(const TrainReport& report, const std::filesystem::path& dir);

/// Method label such as "lora/plan" or "lori_s/all".
std::string method_label(const RunConfig& cfg);

enum class AblationAxis { strategy, k, warmup_fraction, targets };
std::string to_string(AblationAxis a);
AblationAxis parse_axis(const std::string& s);

struct AblationRow {
  std::string value;
  std::uint64_t seed = 0;
  double base_accuracy = 0.0;
  double accuracy = 0.0;
  std::uint64_t trainable = 0;
  double expert_reduction_pct = 0.0;
  double hit_rate = 0.0;
  std::optional<double> jaccard;   // warmup_fraction axis: vs the 100% plan
  std::optional<double> coverage;  // same, percent
};

struct AblationResult {
  AblationAxis axis = AblationAxis::strategy;
  std::vector<AblationRow> rows;
  /// One row per (grid point, seed) followed by mean/std rows per grid point.
  Table table;
};

/// Runs every (grid value, seed) pair. Warm-up profiles are shared per seed
/// across the strategy, k and targets axes.
AblationResult ablate(const BaseModel& base, const RunConfig& cfg, AblationAxis axis,
                      const std::vector<std::string>& grid, std::span<const std::uint64_t> seeds);

struct CrossTaskCell {
  std::uint64_t seed = 0;
  std::size_t target = 0;  // index into the task list
  std::size_t eval = 0;
  double before = 0.0;
  double after = 0.0;
};

struct CrossTaskResult {
  std::vector<CrossTaskCell> cells;
  /// plans[seed index][task index]
  std::vector<std::vector<PlacementPlan>> plans;
  /// seed, target, eval, before, after, delta; then per-pair means.
  Table table;
  /// Mean plan Jaccard for every pair of distinct tasks, per seed.
  Table jaccard_table;
  double mean_cross_jaccard = 0.0;
  double mean_offdiag_delta = 0.0;
  double mean_diag_delta = 0.0;
};

/// Fine-tunes on each task in turn and evaluates on every task before and
/// after. cfg.task is replaced by each entry of `tasks`.
CrossTaskResult cross_task_matrix(const BaseModel& base, const RunConfig& cfg, std::span<const TaskSpec> tasks,
                                  std::span<const std::uint64_t> seeds);

struct GradAuditRow {
  std::string setting;  // "base", "lora", "lori_d", "lori_s"
  GradCheckResult result;
};

/// Finite-difference audit of a freshly initialized model on `batch`: every
/// base parameter, then adapters on all targets under each scheme. B is
/// drawn nonzero so that A receives gradient.
std::vector<GradAuditRow> gradient_audit(const ModelConfig& config, std::span<const Example> batch,
                                         const GradCheckOptions& options);

}  // namespace moelab
