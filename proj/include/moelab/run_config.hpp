#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moelab/pipeline.hpp"
#include "moelab/training.hpp"

namespace moelab {

// Config document: INI-style sections with `key = value` lines.
//
//   [model]      n_layers d_model n_heads d_ff n_experts k_route n_shared vocab max_seq lb_mode lb_weight
//   [pretrain]   steps batch_size lr train_fraction checkpoint
//   [task]       name modulus seq_len min_len alphabet triggers seed n_train n_test
//   [adapt]      warmup_pct k strategy targets experts scheme density rank alpha epochs batch_size lr
//                lb_finetune profile_forward_only seed
//   [experiment] seeds axis grid cross_tasks
//   [gradcheck]  eps tolerance max_per_group batch abs_floor
//
// Every key is optional; unknown sections or keys are a ConfigError.

struct CliConfig {
  CliConfig();

  RunConfig run;  // run.model is the [model] section
  PretrainOptions pretrain;
  double pretrain_train_fraction = 0.35;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  AblationAxis axis = AblationAxis::strategy;
  std::vector<std::string> grid = {"layer_hot", "model_hot", "random", "cold"};
  std::vector<TaskKind> cross_tasks = {TaskKind::mod_add, TaskKind::transduce, TaskKind::refusal};
  double gradcheck_eps = 1e-5;
  double gradcheck_tolerance = 1e-4;
  std::size_t gradcheck_max_per_group = 200;
  std::size_t gradcheck_batch = 4;
  double gradcheck_abs_floor = 1e-5;
  /// "section.key=value" entries applied on top of the document, in order.
  std::vector<std::string> overrides;

  /// Default spec of every cross-task family, sharing the [task] seed.
  std::vector<TaskSpec> cross_task_specs() const;
};

/// Parses a config document on top of the defaults.
CliConfig parse_config(const std::string& text);
CliConfig load_config(const std::filesystem::path& path);

/// Sets one `section.key`; ConfigError for unknown keys or bad values.
void set_config_value(CliConfig& cfg, const std::string& dotted_key, const std::string& value);
/// set_config_value plus a record in cfg.overrides.
void apply_override(CliConfig& cfg, const std::string& dotted_key, const std::string& value);

/// Canonical document with every key; parse_config(to_text(c)) reproduces c
/// (overrides are listed as a comment).
std::string to_text(const CliConfig& cfg);

}  // namespace moelab
