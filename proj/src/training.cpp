#include "moelab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/error.hpp"
#include "moelab/rng.hpp"

namespace moelab {

std::size_t steps_for_epochs(std::size_t n, std::size_t batch_size, std::size_t epochs) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  return epochs * ((n + batch_size - 1) / batch_size);
}

TrainLog train(MoEModel& model, std::span<const Example> data, const TrainOptions& options, const StepHook& hook) {
  if (options.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  TrainLog log;
  if (options.steps == 0) return log;
  if (data.empty()) throw ConfigError("training set is empty");

  OptimizerState state(options.hyper);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = data.size();
  std::uint64_t pass = 0;
  std::vector<const Example*> picked;
  for (std::size_t step = 0; step < options.steps; ++step) {
    if (cursor >= data.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(mix_seed(options.seed, 0x5EED0000 + pass++));
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = std::size_t(rng.uniform_int(0, std::int64_t(i - 1)));
        std::swap(order[i - 1], order[j]);
      }
      cursor = 0;
    }
    picked.clear();
    while (picked.size() < options.batch_size && cursor < data.size()) picked.push_back(&data[order[cursor++]]);
    const Batch batch = make_batch(std::span<const Example* const>(picked));
    const LossAndGrads lg = forward_backward(model, batch, options.loss);
    log.losses.push_back(lg.loss);
    if (hook) hook(step, lg);
    adam_step(model.params(), lg.grads, state);
  }
  log.steps = options.steps;
  return log;
}

ActivationProfile profile_forward(const MoEModel& model, std::span<const Example> data, std::size_t batch_size,
                                  const std::string& source) {
  const ModelConfig& cfg = model.config();
  ActivationProfile p = ActivationProfile::empty(cfg.n_layers, cfg.n_experts, cfg.k_route, source);
  const LossSpec no_lb{false, LbMode::off, 0.0};
  for (const Batch& b : make_batches(data, batch_size)) record(p, model.forward(b, no_lb).trace);
  return p;
}

std::vector<TaskSpec> default_mixture(std::uint64_t seed, double train_fraction) {
  if (!(train_fraction > 0.0) || train_fraction > 1.0) throw ConfigError("train_fraction must be in (0, 1]");
  std::vector<TaskSpec> out;
  for (TaskKind k : {TaskKind::mod_add, TaskKind::transduce, TaskKind::refusal}) {
    TaskSpec s = TaskSpec::defaults(k, seed);
    s.n_train = std::max<std::size_t>(1, std::size_t(std::lround(double(s.n_train) * train_fraction)));
    out.push_back(s);
  }
  return out;
}

PretrainResult pretrain_base(const ModelConfig& config, std::span<const TaskSpec> mixture,
                             const PretrainOptions& options) {
  if (mixture.empty()) throw ConfigError("pretraining mixture is empty");
  config.validate();
  std::vector<TaskData> tasks;
  std::vector<Example> pool;
  for (const TaskSpec& spec : mixture) {
    tasks.push_back(make_task(spec));
    pool.insert(pool.end(), tasks.back().train.begin(), tasks.back().train.end());
  }

  MoEModel model(config, options.seed);
  TrainOptions topt;
  topt.steps = options.steps;
  topt.batch_size = options.batch_size;
  topt.hyper.lr = options.lr;
  topt.loss = model.default_loss();
  topt.seed = mix_seed(options.seed, 0xBA5E);

  PretrainResult res;
  res.log = train(model, pool, topt);
  res.weights = snapshot(model.params());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    res.profiles.push_back(profile_forward(model, tasks[i].train, 64, to_string(mixture[i].kind)));
    res.accuracy.push_back(evaluate(model, tasks[i].test));
  }
  return res;
}

}  // namespace moelab
