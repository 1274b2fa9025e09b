#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moelab/checkpoint.hpp"
#include "moelab/model.hpp"
#include "moelab/optimizer.hpp"
#include "moelab/profiler.hpp"
#include "moelab/tasks.hpp"

namespace moelab {

struct TrainOptions {
  /// Total optimizer steps. Data is walked in seeded shuffled passes.
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  AdamHyper hyper;
  LossSpec loss;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> losses;  // one per step, before the update
  std::size_t steps = 0;
};

/// Called after each forward/backward with the step index and its result.
using StepHook = std::function<void(std::size_t step, const LossAndGrads&)>;

/// Minibatch Adam over `data`. Each pass is a fresh seeded permutation; the
/// last batch of a pass may be short.
TrainLog train(MoEModel& model, std::span<const Example> data, const TrainOptions& options,
               const StepHook& hook = {});

/// Steps in `epochs` full passes over `n` examples.
std::size_t steps_for_epochs(std::size_t n, std::size_t batch_size, std::size_t epochs);

struct PretrainOptions {
  std::size_t steps = 400;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  NamedTensors weights;
  TrainLog log;
  /// Forward-only profile of each mixture task's training set.
  std::vector<ActivationProfile> profiles;
  /// Test accuracy per mixture task.
  std::vector<double> accuracy;
};

/// Default spec of every task family with n_train scaled by `train_fraction`
/// (test sets unchanged).
std::vector<TaskSpec> default_mixture(std::uint64_t seed, double train_fraction = 0.35);

/// Trains a freshly initialized model on the pooled training sets of
/// `mixture` with the config's load-balancing setting.
PretrainResult pretrain_base(const ModelConfig& config, std::span<const TaskSpec> mixture,
                             const PretrainOptions& options);

/// Forward-only activation counts of `model` over `data`.
ActivationProfile profile_forward(const MoEModel& model, std::span<const Example> data, std::size_t batch_size,
                                  const std::string& source);

}  // namespace moelab
