#include "moelab/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>

#include "moelab/digest.hpp"
#include "moelab/error.hpp"
#include "moelab/rng.hpp"
#include "moelab/training.hpp"

namespace moelab {

namespace {

// Stream salts for the per-run seed.
constexpr std::uint64_t kSaltAdapterInit = 1;
constexpr std::uint64_t kSaltDataOrder = 2;
constexpr std::uint64_t kSaltWarmSubset = 3;
constexpr std::uint64_t kSaltWarmInit = 4;
constexpr std::uint64_t kSaltWarmOrder = 5;
constexpr std::uint64_t kSaltRandomPlan = 6;

LossSpec finetune_loss(const MoEModel& model, bool lb) {
  if (lb) return model.default_loss();
  return LossSpec{false, LbMode::off, 0.0};
}

struct Adapted {
  TrainReport report;
  MoEModel model;
};

void add_counters(ExecCounters& into, const ExecCounters& c) {
  if (into.hits.empty()) {
    into = c;
    return;
  }
  for (std::size_t l = 0; l < c.hits.size(); ++l) {
    into.hits[l] += c.hits[l];
    into.activated[l] += c.activated[l];
  }
}

Adapted finetune_impl(const BaseModel& base, const TaskData& data, const PlacementPlan* plan, const RunConfig& cfg,
                      const NamedTensors* dense_phase) {
  cfg.validate();
  if (cfg.targets.experts == ExpertTargets::plan && !plan) throw ConfigError("expert targets = plan but no plan given");
  if (cfg.scheme.kind == SchemeKind::lori_s && !dense_phase) {
    throw ConfigError("scheme lori_s needs the dense-phase (lori_d) adapters; run lori_d first");
  }
  const ModelConfig& mc = base.config;
  const PlacementPlan* used_plan = cfg.targets.experts == ExpertTargets::plan ? plan : nullptr;

  MoEModel model = instantiate(base);
  TrainReport rep;
  rep.method = method_label(cfg);
  rep.task = to_string(cfg.task.kind);
  rep.seed = cfg.seed;
  rep.base_accuracy = evaluate(model, data.test);

  // Routed experts that get no adapter must come out bit-identical.
  std::vector<std::pair<std::size_t, std::size_t>> cold;
  if (cfg.targets.experts != ExpertTargets::all) {
    for (std::size_t l = 0; l < mc.n_layers; ++l) {
      for (std::size_t e = 0; e < mc.n_experts; ++e) {
        if (!used_plan || !used_plan->contains(l, int(e))) cold.emplace_back(l, e);
      }
    }
  }
  std::vector<std::string> cold_before;
  for (auto [l, e] : cold) cold_before.push_back(expert_sha256(model, l, e));

  AttachOptions ao;
  ao.targets = cfg.targets;
  ao.plan = used_plan;
  ao.scheme = cfg.scheme;
  ao.rank = cfg.rank;
  ao.alpha = cfg.alpha;
  ao.seed = mix_seed(cfg.seed, kSaltAdapterInit);
  attach(model, ao);
  if (cfg.scheme.kind == SchemeKind::lori_s) install_sparse_masks(model, *dense_phase, cfg.scheme.density);
  set_trainability(model, cfg.scheme);
  const NamedTensors adapters_before = adapter_snapshot(model);

  TrainOptions topt;
  topt.steps = steps_for_epochs(data.train.size(), cfg.batch_size, cfg.epochs);
  topt.batch_size = cfg.batch_size;
  topt.hyper.lr = cfg.lr;
  topt.loss = finetune_loss(model, cfg.lb_finetune);
  topt.seed = mix_seed(cfg.seed, kSaltDataOrder);
  bool first = true;
  const TrainLog log = train(model, data.train, topt, [&](std::size_t, const LossAndGrads& lg) {
    const FlopsReport f = adapter_flops(lg.trace, model);
    rep.flops = first ? f : accumulate(rep.flops, f);
    first = false;
    if (used_plan) add_counters(rep.exec, exec_counters(lg.trace, *used_plan));
  });
  rep.steps = log.steps;
  if (!log.losses.empty()) {
    rep.initial_loss = log.losses.front();
    rep.final_loss = log.losses.back();
  }

  for (std::size_t i = 0; i < cold.size(); ++i) {
    if (expert_sha256(model, cold[i].first, cold[i].second) != cold_before[i]) {
      throw InvariantViolation("cold expert " + std::to_string(cold[i].second) + " of layer " +
                               std::to_string(cold[i].first) + " changed during fine-tuning");
    }
  }
  rep.cold_experts_checked = cold.size();

  // Frozen A and off-mask B coordinates keep their exact bits.
  const ParamRegistry& params = model.params();
  for (const auto& [name, before] : adapters_before) {
    const ParamEntry& now = params.entry(name);
    if (!now.trainable) {
      if (!bitwise_equal(now.value, before)) throw InvariantViolation("frozen adapter tensor " + name + " changed");
    } else if (now.mask) {
      for (std::size_t i = 0; i < before.numel(); ++i) {
        if ((*now.mask)[i] == 0.0 && std::bit_cast<std::uint64_t>(now.value[i]) != std::bit_cast<std::uint64_t>(before[i])) {
          throw InvariantViolation("off-mask coordinate " + std::to_string(i) + " of " + name + " changed");
        }
      }
    }
  }

  rep.accuracy = evaluate(model, data.test);
  rep.params = count_params(model);
  rep.closed_form_trainable = closed_form_trainable(mc, cfg.targets, used_plan, cfg.scheme, cfg.rank);
  if (rep.params.trainable != rep.closed_form_trainable) {
    throw InvariantViolation("trainable count " + std::to_string(rep.params.trainable) + " differs from closed form " +
                             std::to_string(rep.closed_form_trainable));
  }
  if (used_plan) rep.plan = *used_plan;
  rep.adapters = adapter_snapshot(model);
  return Adapted{std::move(rep), std::move(model)};
}

// Dense phase first when the scheme is sparse.
Adapted finetune_with_phases(const BaseModel& base, const TaskData& data, const PlacementPlan* plan,
                             const RunConfig& cfg, const NamedTensors* cached_dense = nullptr,
                             NamedTensors* dense_out = nullptr) {
  if (cfg.scheme.kind != SchemeKind::lori_s) return finetune_impl(base, data, plan, cfg, nullptr);
  NamedTensors dense;
  if (cached_dense) {
    dense = *cached_dense;
  } else {
    RunConfig d = cfg;
    d.scheme.kind = SchemeKind::lori_d;
    dense = finetune_impl(base, data, plan, d, nullptr).report.adapters;
  }
  if (dense_out) *dense_out = dense;
  return finetune_impl(base, data, plan, cfg, &dense);
}

bool needs_plan(const RunConfig& cfg) { return cfg.targets.experts == ExpertTargets::plan; }

// Warm-up, plan and fine-tune for one configuration.
Adapted run_once(const BaseModel& base, const TaskData& data, const RunConfig& cfg,
                 const ActivationProfile* shared_profile = nullptr, const WarmupResult* shared_warm = nullptr) {
  std::optional<WarmupResult> warm;
  std::optional<PlacementPlan> plan;
  if (needs_plan(cfg)) {
    const ActivationProfile* prof = shared_profile;
    if (!prof) {
      warm = run_warmup(base, data, cfg);
      shared_warm = &*warm;
      prof = &warm->profile;
    }
    plan = build_plan(*prof, cfg);
    Adapted out = finetune_with_phases(base, data, &*plan, cfg);
    out.report.profile = *prof;
    if (shared_warm) {
      out.report.warmup_steps = shared_warm->steps;
      out.report.warmup_overhead = shared_warm->overhead;
    }
    return out;
  }
  return finetune_with_phases(base, data, nullptr, cfg);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

// Sample standard deviation (0 for a single value).
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace

BaseModel load_base(const std::filesystem::path& path, const ModelConfig& config) {
  config.validate();
  if (!std::filesystem::exists(path)) throw IoError("base checkpoint not found: " + path.string());
  BaseModel base{config, load_checkpoint(path)};
  MoEModel probe(config, 0);
  if (base.weights.size() != probe.params().size()) {
    throw ConfigError("checkpoint " + path.string() + " holds " + std::to_string(base.weights.size()) +
                      " tensors, the configured model has " + std::to_string(probe.params().size()));
  }
  restore(probe.params(), base.weights);
  return base;
}

MoEModel instantiate(const BaseModel& base) {
  MoEModel m(base.config, 0);
  restore(m.params(), base.weights);
  return m;
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  targets.validate();
  scheme.validate();
  if (!(warmup_pct > 0.0) || warmup_pct > 100.0) throw ConfigError("warm-up fraction must be in (0, 100]");
  if (k == 0 || k > model.n_experts) {
    throw ConfigError("k must be in [1, " + std::to_string(model.n_experts) + "], got " + std::to_string(k));
  }
  if (rank == 0) throw ConfigError("rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("alpha must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
}

std::string method_label(const RunConfig& cfg) {
  std::string e = cfg.targets.experts == ExpertTargets::all    ? "all"
                  : cfg.targets.experts == ExpertTargets::plan ? "plan"
                                                               : "none";
  return to_string(cfg.scheme.kind) + "/" + e;
}

WarmupResult run_warmup(const BaseModel& base, const TaskData& data, const RunConfig& cfg) {
  cfg.validate();
  const std::size_t n = data.train.size();
  const auto n_sub = std::size_t(std::lround(cfg.warmup_pct / 100.0 * double(n)));
  if (n_sub == 0) {
    throw ConfigError("warm-up subset is empty: " + fmt(cfg.warmup_pct, 2) + "% of " + std::to_string(n) +
                      " training examples");
  }
  // Seeded sample without replacement, kept in dataset order so that p = 100
  // reproduces the full training set exactly.
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(mix_seed(cfg.seed, kSaltWarmSubset));
  for (std::size_t i = 0; i < n_sub; ++i) {
    const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(n - 1)));
    std::swap(ids[i], ids[j]);
  }
  std::sort(ids.begin(), ids.begin() + std::ptrdiff_t(n_sub));
  std::vector<Example> subset;
  for (std::size_t i = 0; i < n_sub; ++i) subset.push_back(data.train[ids[i]]);

  WarmupResult out;
  out.subset_size = n_sub;
  out.finetune_steps = steps_for_epochs(n, cfg.batch_size, cfg.epochs);
  const std::string source = "warmup:" + to_string(cfg.task.kind) + ":p=" + fmt(cfg.warmup_pct, 2);
  MoEModel model = instantiate(base);
  if (cfg.profile_forward_only) {
    out.profile = profile_forward(model, subset, cfg.batch_size, source + ":forward");
    out.steps = 0;
    out.overhead = 0.0;
    return out;
  }
  out.steps = std::max<std::size_t>(1, std::size_t(std::lround(cfg.warmup_pct / 100.0 * double(out.finetune_steps))));
  out.overhead = out.finetune_steps ? double(out.steps) / double(out.finetune_steps) : 0.0;

  AttachOptions ao;
  ao.targets = TargetSet::all_targets(ExpertTargets::all);
  ao.scheme = Scheme{SchemeKind::lora, cfg.scheme.density};
  ao.rank = cfg.rank;
  ao.alpha = cfg.alpha;
  ao.seed = mix_seed(cfg.seed, kSaltWarmInit);
  attach(model, ao);
  set_trainability(model, ao.scheme);

  const ModelConfig& mc = base.config;
  out.profile = ActivationProfile::empty(mc.n_layers, mc.n_experts, mc.k_route, source);
  TrainOptions topt;
  topt.steps = out.steps;
  topt.batch_size = cfg.batch_size;
  topt.hyper.lr = cfg.lr;
  topt.loss = finetune_loss(model, cfg.lb_finetune);
  topt.seed = mix_seed(cfg.seed, kSaltWarmOrder);
  train(model, subset, topt, [&](std::size_t, const LossAndGrads& lg) { record(out.profile, lg.trace); });
  return out;
}

PlacementPlan build_plan(const ActivationProfile& profile, const RunConfig& cfg) {
  std::optional<std::uint64_t> seed;
  if (cfg.strategy == SelectionStrategy::random) seed = mix_seed(cfg.seed, kSaltRandomPlan);
  return select(profile, cfg.k, cfg.strategy, seed);
}

TrainReport finetune(const BaseModel& base, const TaskData& data, const PlacementPlan* plan, const RunConfig& cfg,
                     const NamedTensors* dense_phase) {
  return finetune_impl(base, data, plan, cfg, dense_phase).report;
}

TrainReport run_end_to_end(const BaseModel& base, const RunConfig& cfg) {
  cfg.validate();
  const TaskData data = make_task(cfg.task);
  std::optional<WarmupResult> warm;
  std::optional<PlacementPlan> plan;
  if (needs_plan(cfg)) {
    warm = run_warmup(base, data, cfg);
    plan = build_plan(warm->profile, cfg);
  }
  const PlacementPlan* pp = plan ? &*plan : nullptr;

  std::optional<NamedTensors> cached;
  const std::filesystem::path dense_dir = cfg.out_dir.empty() ? std::filesystem::path{} : cfg.out_dir / "dense_phase";
  if (cfg.scheme.kind == SchemeKind::lori_s && !dense_dir.empty() && std::filesystem::exists(dense_dir / "adapters.ckpt")) {
    cached = load_checkpoint(dense_dir / "adapters.ckpt");
  }
  NamedTensors dense;
  Adapted out = finetune_with_phases(base, data, pp, cfg, cached ? &*cached : nullptr, &dense);
  if (cfg.scheme.kind == SchemeKind::lori_s && !dense_dir.empty() && !cached) {
    save_checkpoint(dense_dir / "adapters.ckpt", dense);
  }
  if (warm) {
    out.report.profile = warm->profile;
    out.report.warmup_steps = warm->steps;
    out.report.warmup_overhead = warm->overhead;
  }
  if (!cfg.out_dir.empty()) write_report(out.report, cfg.out_dir);
  return std::move(out.report);
}

Table TrainReport::to_table() const {
  Table t;
  t.header = {"key", "value"};
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  t.add({"method", method});
  t.add({"task", task});
  t.add({"seed", u(seed)});
  t.add({"steps", u(steps)});
  t.add({"initial_loss", fmt(initial_loss, 6)});
  t.add({"final_loss", fmt(final_loss, 6)});
  t.add({"base_accuracy", fmt(base_accuracy, 6)});
  t.add({"accuracy", fmt(accuracy, 6)});
  t.add({"base_params", u(params.base_total)});
  t.add({"adapter_params", u(params.adapter_total)});
  t.add({"trainable_params", u(params.trainable)});
  t.add({"closed_form_trainable", u(closed_form_trainable)});
  t.add({"trainable_fraction_pct", fmt(100.0 * params.fraction, 4)});
  for (const auto& [group, n] : params.per_group) t.add({"trainable_" + group, u(n)});
  t.add({"flops_tokens", u(flops.tokens)});
  t.add({"flops_forward", u(flops.forward)});
  t.add({"flops_train", u(flops.train)});
  t.add({"flops_attention_forward", u(flops.attention_forward)});
  t.add({"flops_gate_forward", u(flops.gate_forward)});
  t.add({"flops_expert_forward", u(flops.expert_forward)});
  t.add({"flops_shared_forward", u(flops.shared_forward)});
  t.add({"flops_baseline_expert_forward", u(flops.baseline_expert_forward)});
  t.add({"flops_expert_reduction_pct", fmt(flops.expert_reduction_pct, 4)});
  t.add({"flops_reduction_pct", fmt(flops.reduction_pct, 4)});
  t.add({"hot_hit_rate", exec.hits.empty() ? "" : fmt(exec.hit_rate(), 6)});
  t.add({"warmup_steps", u(warmup_steps)});
  t.add({"warmup_overhead", fmt(warmup_overhead, 6)});
  t.add({"cold_experts_checked", u(cold_experts_checked)});
  t.add({"plan", plan ? "plan.txt" : ""});
  t.add({"profile", profile ? "profile.txt" : ""});
  return t;
}

void write_report(const TrainReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  report.to_table().save(dir / "report");
  save_checkpoint(dir / "adapters.ckpt", report.adapters);
  if (report.plan) save_plan(dir / "plan.txt", *report.plan);
  if (report.profile) {
    save_profile(dir / "profile.txt", *report.profile);
    export_heatmap(*report.profile, dir / "heatmap.csv");
  }
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::strategy:
      return "strategy";
    case AblationAxis::k:
      return "k";
    case AblationAxis::warmup_fraction:
      return "warmup_fraction";
    case AblationAxis::targets:
      return "targets";
  }
  return "strategy";
}

AblationAxis parse_axis(const std::string& s) {
  if (s == "strategy") return AblationAxis::strategy;
  if (s == "k") return AblationAxis::k;
  if (s == "warmup_fraction") return AblationAxis::warmup_fraction;
  if (s == "targets") return AblationAxis::targets;
  throw ConfigError("unknown ablation axis: " + s + " (expected strategy|k|warmup_fraction|targets)");
}

namespace {

RunConfig apply_axis(RunConfig c, AblationAxis axis, const std::string& value) {
  try {
    switch (axis) {
      case AblationAxis::strategy:
        c.strategy = parse_strategy(value);
        break;
      case AblationAxis::k:
        c.k = std::stoul(value);
        break;
      case AblationAxis::warmup_fraction:
        c.warmup_pct = std::stod(value);
        break;
      case AblationAxis::targets:
        c.targets = parse_targets(value, c.targets.experts == ExpertTargets::none ? ExpertTargets::plan
                                                                                  : c.targets.experts);
        break;
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad " + to_string(axis) + " grid value: " + value);
  }
  c.validate();
  return c;
}

}  // namespace

AblationResult ablate(const BaseModel& base, const RunConfig& cfg, AblationAxis axis,
                      const std::vector<std::string>& grid, std::span<const std::uint64_t> seeds) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  cfg.validate();
  for (const std::string& v : grid) apply_axis(cfg, axis, v);  // fail before any training
  const TaskData data = make_task(cfg.task);

  AblationResult res;
  res.axis = axis;
  std::vector<std::vector<AblationRow>> by_value(grid.size());
  for (std::uint64_t seed : seeds) {
    RunConfig c = cfg;
    c.seed = seed;
    // One warm-up per seed, shared by every grid point except on the
    // warm-up axis itself.
    std::optional<WarmupResult> shared;
    std::optional<PlacementPlan> full_plan;
    if (axis == AblationAxis::warmup_fraction) {
      RunConfig full = c;
      full.warmup_pct = 100.0;
      full_plan = build_plan(run_warmup(base, data, full).profile, full);
    } else {
      shared = run_warmup(base, data, c);
    }
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
      const RunConfig cv = apply_axis(c, axis, grid[gi]);
      std::optional<WarmupResult> own;
      const WarmupResult* warm = shared ? &*shared : nullptr;
      if (!warm && needs_plan(cv)) {
        own = run_warmup(base, data, cv);
        warm = &*own;
      }
      const Adapted a = run_once(base, data, cv, warm ? &warm->profile : nullptr, warm);
      AblationRow row;
      row.value = grid[gi];
      row.seed = seed;
      row.base_accuracy = a.report.base_accuracy;
      row.accuracy = a.report.accuracy;
      row.trainable = a.report.params.trainable;
      row.expert_reduction_pct = a.report.flops.expert_reduction_pct;
      row.hit_rate = a.report.exec.hits.empty() ? 1.0 : a.report.exec.hit_rate();
      if (full_plan && a.report.plan) {
        row.jaccard = jaccard(*a.report.plan, *full_plan).mean;
        row.coverage = coverage(*a.report.plan, *full_plan);
      }
      by_value[gi].push_back(row);
    }
  }

  const bool fraction_axis = axis == AblationAxis::warmup_fraction;
  res.table.header = {to_string(axis), "seed", "base_accuracy", "accuracy", "trainable", "expert_flops_reduction_pct",
                      "hot_hit_rate"};
  if (fraction_axis) {
    res.table.header.push_back("jaccard_vs_full");
    res.table.header.push_back("coverage_vs_full_pct");
  }
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v, 6) : std::string{}; };
  for (const auto& rows : by_value) {
    for (const AblationRow& r : rows) {
      std::vector<std::string> cells = {r.value,         std::to_string(r.seed), fmt(r.base_accuracy, 6),
                                        fmt(r.accuracy, 6), std::to_string(r.trainable),
                                        fmt(r.expert_reduction_pct, 4), fmt(r.hit_rate, 6)};
      if (fraction_axis) {
        cells.push_back(opt(r.jaccard));
        cells.push_back(opt(r.coverage));
      }
      res.table.add(std::move(cells));
      res.rows.push_back(r);
    }
  }
  for (const auto& rows : by_value) {
    std::vector<double> base_acc, acc, trainable, red, hit, jac, cov;
    for (const AblationRow& r : rows) {
      base_acc.push_back(r.base_accuracy);
      acc.push_back(r.accuracy);
      trainable.push_back(double(r.trainable));
      red.push_back(r.expert_reduction_pct);
      hit.push_back(r.hit_rate);
      if (r.jaccard) jac.push_back(*r.jaccard);
      if (r.coverage) cov.push_back(*r.coverage);
    }
    for (bool is_mean : {true, false}) {
      auto stat = [&](const std::vector<double>& v, int prec) { return fmt(is_mean ? mean_of(v) : std_of(v), prec); };
      std::vector<std::string> cells = {rows.front().value, is_mean ? "mean" : "std", stat(base_acc, 6), stat(acc, 6),
                                        stat(trainable, 1),  stat(red, 4),            stat(hit, 6)};
      if (fraction_axis) {
        cells.push_back(jac.empty() ? "" : stat(jac, 6));
        cells.push_back(cov.empty() ? "" : stat(cov, 4));
      }
      res.table.add(std::move(cells));
    }
  }
  return res;
}

CrossTaskResult cross_task_matrix(const BaseModel& base, const RunConfig& cfg, std::span<const TaskSpec> tasks,
                                  std::span<const std::uint64_t> seeds) {
  if (tasks.empty()) throw ConfigError("cross-task matrix needs at least one task");
  if (seeds.empty()) throw ConfigError("cross-task matrix needs at least one seed");
  std::vector<TaskData> data;
  for (const TaskSpec& t : tasks) data.push_back(make_task(t));
  const std::size_t n = tasks.size();

  std::vector<double> before(n);
  {
    const MoEModel plain = instantiate(base);
    for (std::size_t e = 0; e < n; ++e) before[e] = evaluate(plain, data[e].test);
  }

  CrossTaskResult res;
  res.table.header = {"seed", "target_task", "eval_task", "before", "after", "delta"};
  std::vector<double> diag, off;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> pair_delta;
  for (std::uint64_t seed : seeds) {
    std::vector<PlacementPlan> plans;
    for (std::size_t t = 0; t < n; ++t) {
      RunConfig c = cfg;
      c.task = tasks[t];
      c.seed = seed;
      const Adapted a = run_once(base, data[t], c);
      if (a.report.plan) plans.push_back(*a.report.plan);
      for (std::size_t e = 0; e < n; ++e) {
        CrossTaskCell cell{seed, t, e, before[e], e == t ? a.report.accuracy : evaluate(a.model, data[e].test)};
        const double delta = 100.0 * (cell.after - cell.before);
        (e == t ? diag : off).push_back(delta);
        pair_delta[{t, e}].push_back(delta);
        res.table.add({std::to_string(seed), to_string(tasks[t].kind), to_string(tasks[e].kind), fmt(cell.before, 6),
                       fmt(cell.after, 6), fmt(delta, 4)});
        res.cells.push_back(cell);
      }
    }
    res.plans.push_back(std::move(plans));
  }
  for (const auto& [key, deltas] : pair_delta) {
    res.table.add({"mean", to_string(tasks[key.first].kind), to_string(tasks[key.second].kind), fmt(before[key.second], 6),
                   "", fmt(mean_of(deltas), 4)});
  }
  res.mean_diag_delta = mean_of(diag);
  res.mean_offdiag_delta = mean_of(off);

  res.jaccard_table.header = {"seed", "task_a", "task_b", "jaccard"};
  std::vector<double> jac;
  for (std::size_t s = 0; s < res.plans.size(); ++s) {
    const auto& plans = res.plans[s];
    for (std::size_t i = 0; i < plans.size(); ++i) {
      for (std::size_t j = i + 1; j < plans.size(); ++j) {
        const double m = jaccard(plans[i], plans[j]).mean;
        jac.push_back(m);
        res.jaccard_table.add({std::to_string(seeds[s]), to_string(tasks[i].kind), to_string(tasks[j].kind), fmt(m, 6)});
      }
    }
  }
  res.mean_cross_jaccard = mean_of(jac);
  return res;
}

std::vector<GradAuditRow> gradient_audit(const ModelConfig& config, std::span<const Example> batch,
                                         const GradCheckOptions& options) {
  config.validate();
  const Batch b = make_batch(batch);
  std::vector<GradAuditRow> out;
  {
    MoEModel model(config, options.seed);
    out.push_back({"base", finite_diff_check(model, b, model.default_loss(), options)});
  }
  // Nonzero B on the support of its mask (or everywhere when unmasked).
  auto randomize_b = [&](MoEModel& model, std::uint64_t salt) {
    Rng rng(mix_seed(options.seed, salt));
    for (ParamEntry& e : model.params().entries()) {
      if (e.name.size() < 2 || e.name.compare(e.name.size() - 2, 2, ".B") != 0 || !is_adapter_param(e.name)) continue;
      for (std::size_t i = 0; i < e.value.numel(); ++i) {
        if (!e.mask || (*e.mask)[i] != 0.0) e.value[i] = rng.normal(0.0, 0.1);
      }
    }
  };
  auto adapted = [&](SchemeKind kind) {
    MoEModel model(config, options.seed);
    AttachOptions ao;
    ao.targets = TargetSet::all_targets(ExpertTargets::all);
    ao.scheme.kind = kind;
    ao.seed = mix_seed(options.seed, 11);
    attach(model, ao);
    if (kind == SchemeKind::lori_s) {
      randomize_b(model, 12);
      install_sparse_masks(model, adapter_snapshot(model), ao.scheme.density);
    }
    set_trainability(model, ao.scheme);
    randomize_b(model, 13);
    return model;
  };
  for (SchemeKind kind : {SchemeKind::lora, SchemeKind::lori_d, SchemeKind::lori_s}) {
    MoEModel model = adapted(kind);
    out.push_back({to_string(kind), finite_diff_check(model, b, model.default_loss(), options)});
  }
  return out;
}

}  // namespace moelab
