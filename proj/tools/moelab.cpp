#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/accounting.hpp"
#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/run_config.hpp"
#include "moelab/table.hpp"
#include "moelab/training.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> sets;
  std::string command_line;
};

struct Extra {
  std::string base;
  std::string profile;
  std::string plan;
  std::string strategy;
  std::optional<std::size_t> k;
  std::string axis;
  std::string grid;
  std::string runs;
};

int exit_code(const Error& e) {
  const std::string c = e.category();
  if (c == "config") return 2;
  if (c == "invariant") return 3;
  if (c == "numerical") return 4;
  if (c == "io") return 5;
  return 1;
}

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Config file, then --set entries, then the dedicated flags.
CliConfig resolve(const Common& c, const Extra& x) {
  CliConfig cfg = c.config.empty() ? CliConfig{} : load_config(c.config);
  for (const std::string& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + s);
    apply_override(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) {
    apply_override(cfg, "adapt.seed", std::to_string(*c.seed));
    apply_override(cfg, "experiment.seeds", std::to_string(*c.seed));
  }
  if (!x.base.empty()) apply_override(cfg, "pretrain.checkpoint", x.base);
  if (!x.strategy.empty()) apply_override(cfg, "adapt.strategy", x.strategy);
  if (x.k) apply_override(cfg, "adapt.k", std::to_string(*x.k));
  if (!x.axis.empty()) apply_override(cfg, "experiment.axis", x.axis);
  if (!x.grid.empty()) apply_override(cfg, "experiment.grid", x.grid);
  return cfg;
}

// Resolved config verbatim, plus a separate meta file for anything time-dependent.
void record_run(const fs::path& out, const CliConfig& cfg, const Common& c) {
  fs::create_directories(out);
  write_text(out / "config.cfg", to_text(cfg));
  write_text(out / "meta.txt", "started = " + now_utc() + "\ncommand = " + c.command_line + "\n");
}

BaseModel base_of(const CliConfig& cfg) {
  if (cfg.run.base_checkpoint.empty()) throw ConfigError("no base checkpoint (set pretrain.checkpoint or --base)");
  return load_base(cfg.run.base_checkpoint, cfg.run.model);
}

int cmd_pretrain(const CliConfig& cfg, const fs::path& out) {
  PretrainOptions opt = cfg.pretrain;
  opt.seed = cfg.run.seed;
  const std::vector<TaskSpec> mixture = default_mixture(cfg.run.task.seed, cfg.pretrain_train_fraction);
  const PretrainResult res = pretrain_base(cfg.run.model, mixture, opt);
  save_checkpoint(out / "base.ckpt", res.weights);

  Table losses;
  losses.header = {"step", "loss"};
  for (std::size_t i = 0; i < res.log.losses.size(); ++i) losses.add({std::to_string(i), fmt(res.log.losses[i], 6)});
  losses.save(out / "losses");

  Table summary;
  summary.header = {"task", "test_accuracy", "pooled_top25_ratio", "layers_top25_over_2x", "per_layer_top25_ratio"};
  ActivationProfile pooled =
      ActivationProfile::empty(cfg.run.model.n_layers, cfg.run.model.n_experts, cfg.run.model.k_route, "mixture");
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    const ActivationProfile& p = res.profiles[i];
    const std::string name = to_string(mixture[i].kind);
    save_profile(out / ("profile_" + name + ".txt"), p);
    export_heatmap(p, out / ("heatmap_" + name + ".csv"));
    const std::vector<double> ratios = top_share_ratio(p, 0.25);
    std::size_t skewed = 0;
    std::string per_layer;
    for (std::size_t l = 0; l < ratios.size(); ++l) {
      skewed += ratios[l] > 2.0;
      per_layer += (l ? " " : "") + fmt(ratios[l], 3);
    }
    summary.add({name, fmt(res.accuracy[i], 4), fmt(pooled_top_share_ratio(p, 0.25), 4), std::to_string(skewed),
                 per_layer});
    for (std::size_t l = 0; l < p.n_layers(); ++l) {
      for (std::size_t e = 0; e < p.n_experts(); ++e) pooled.counts[l][e] += p.counts[l][e];
    }
    pooled.tokens_seen += p.tokens_seen;
  }
  summary.add({"mixture", "", fmt(pooled_top_share_ratio(pooled, 0.25), 4), "", ""});
  export_heatmap(pooled, out / "heatmap_mixture.csv");
  summary.save(out / "pretrain");
  std::cout << summary.to_markdown();
  std::cout << "base checkpoint: " << (out / "base.ckpt").string() << "\n";
  return 0;
}

int cmd_profile(const CliConfig& cfg, const fs::path& out) {
  const BaseModel base = base_of(cfg);
  const TaskData data = make_task(cfg.run.task);
  const WarmupResult w = run_warmup(base, data, cfg.run);
  save_profile(out / "profile.txt", w.profile);
  export_heatmap(w.profile, out / "heatmap.csv");
  Table t;
  t.header = {"subset_size", "warmup_steps", "finetune_steps", "overhead"};
  t.add({std::to_string(w.subset_size), std::to_string(w.steps), std::to_string(w.finetune_steps), fmt(w.overhead, 6)});
  t.save(out / "warmup");
  std::cout << t.to_markdown();
  return 0;
}

int cmd_plan(const CliConfig& cfg, const fs::path& out, const Extra& x) {
  if (x.profile.empty()) throw ConfigError("plan needs --profile");
  const ActivationProfile p = load_profile(x.profile);
  const PlacementPlan plan = build_plan(p, cfg.run);
  save_plan(out / "plan.txt", plan);
  std::cout << plan_to_text(plan);
  return 0;
}

int cmd_finetune(const CliConfig& cfg, const fs::path& out, const Extra& x) {
  const BaseModel base = base_of(cfg);
  const TaskData data = make_task(cfg.run.task);
  std::optional<PlacementPlan> plan;
  if (!x.plan.empty()) plan = load_plan(x.plan);
  std::optional<NamedTensors> dense;
  if (cfg.run.scheme.kind == SchemeKind::lori_s) {
    const fs::path cache = out / "dense_phase" / "adapters.ckpt";
    if (!fs::exists(cache)) {
      throw ConfigError("scheme lori_s needs dense-phase artifacts at " + cache.string() +
                        " (run finetune with adapt.scheme = lori_d and --out-dir " + (out / "dense_phase").string() +
                        " first)");
    }
    dense = load_checkpoint(cache);
  }
  const TrainReport rep = finetune(base, data, plan ? &*plan : nullptr, cfg.run, dense ? &*dense : nullptr);
  write_report(rep, out);
  std::cout << rep.to_table().to_markdown();
  return 0;
}

int cmd_run(CliConfig cfg, const fs::path& out) {
  const BaseModel base = base_of(cfg);
  cfg.run.out_dir = out;
  const TrainReport rep = run_end_to_end(base, cfg.run);
  std::cout << rep.to_table().to_markdown();
  return 0;
}

int cmd_ablate(const CliConfig& cfg, const fs::path& out) {
  const BaseModel base = base_of(cfg);
  const AblationResult res = ablate(base, cfg.run, cfg.axis, cfg.grid, cfg.seeds);
  res.table.save(out / ("ablate_" + to_string(cfg.axis)));
  std::cout << res.table.to_markdown();
  return 0;
}

int cmd_crosstask(const CliConfig& cfg, const fs::path& out) {
  const BaseModel base = base_of(cfg);
  const std::vector<TaskSpec> tasks = cfg.cross_task_specs();
  const CrossTaskResult res = cross_task_matrix(base, cfg.run, tasks, cfg.seeds);
  res.table.save(out / "crosstask");
  res.jaccard_table.save(out / "crosstask_jaccard");
  std::cout << res.table.to_markdown() << "\n" << res.jaccard_table.to_markdown();
  std::cout << "mean diagonal delta (points): " << fmt(res.mean_diag_delta, 3) << "\n"
            << "mean off-diagonal delta (points): " << fmt(res.mean_offdiag_delta, 3) << "\n"
            << "mean cross-task plan jaccard: " << fmt(res.mean_cross_jaccard, 4) << "\n";
  return 0;
}

// Closed-form parameter counts for every scheme x placement, plus traced
// FLOPs over the task's test set when a base checkpoint and plan are given.
int cmd_flops(const CliConfig& cfg, const fs::path& out, const Extra& x) {
  const ModelConfig& mc = cfg.run.model;
  mc.validate();
  std::optional<PlacementPlan> plan;
  if (!x.plan.empty()) plan = load_plan(x.plan);
  PlacementPlan first_k;
  first_k.k = cfg.run.k;
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    std::vector<int> h;
    for (std::size_t e = 0; e < cfg.run.k; ++e) h.push_back(int(e));
    first_k.hot.push_back(h);
  }
  const PlacementPlan& p = plan ? *plan : first_k;

  Table params;
  params.header = {"scheme", "experts", "trainable", "attention", "gate", "expert", "shared"};
  for (SchemeKind kind : {SchemeKind::lora, SchemeKind::lori_d, SchemeKind::lori_s}) {
    for (ExpertTargets e : {ExpertTargets::all, ExpertTargets::plan}) {
      TargetSet t = cfg.run.targets;
      t.experts = e;
      Scheme s = cfg.run.scheme;
      s.kind = kind;
      std::map<std::string, std::uint64_t> g;
      const std::uint64_t n = closed_form_trainable(mc, t, e == ExpertTargets::plan ? &p : nullptr, s, cfg.run.rank, &g);
      params.add({to_string(kind), e == ExpertTargets::all ? "all" : "plan", std::to_string(n),
                  std::to_string(g["attention"]), std::to_string(g["gate"]), std::to_string(g["expert"]),
                  std::to_string(g["shared"])});
    }
  }
  params.save(out / "params");
  std::cout << params.to_markdown();

  if (cfg.run.base_checkpoint.empty()) return 0;
  const BaseModel base = base_of(cfg);
  const TaskData data = make_task(cfg.run.task);
  Table flops;
  flops.header = {"experts", "tokens", "forward", "train", "expert_forward", "baseline_expert_forward",
                  "expert_reduction_pct", "reduction_pct"};
  for (ExpertTargets e : {ExpertTargets::all, ExpertTargets::plan}) {
    MoEModel model = instantiate(base);
    AttachOptions ao;
    ao.targets = cfg.run.targets;
    ao.targets.experts = e;
    ao.plan = &p;
    ao.rank = cfg.run.rank;
    ao.alpha = cfg.run.alpha;
    attach(model, ao);
    std::optional<FlopsReport> acc;
    for (const Batch& b : make_batches(data.test, cfg.run.batch_size)) {
      const FlopsReport f = adapter_flops(model.forward(b, LossSpec{false, LbMode::off, 0.0}).trace, model);
      acc = acc ? accumulate(*acc, f) : f;
    }
    const FlopsReport& f = *acc;
    flops.add({e == ExpertTargets::all ? "all" : "plan", std::to_string(f.tokens), std::to_string(f.forward),
               std::to_string(f.train), std::to_string(f.expert_forward), std::to_string(f.baseline_expert_forward),
               fmt(f.expert_reduction_pct, 4), fmt(f.reduction_pct, 4)});
  }
  flops.save(out / "flops");
  std::cout << "\n" << flops.to_markdown();
  return 0;
}

int cmd_gradcheck(const CliConfig& cfg, const fs::path& out) {
  TaskSpec spec = cfg.run.task;
  const TaskData data = make_task(spec);
  const std::size_t n = std::min(cfg.gradcheck_batch, data.train.size());
  GradCheckOptions opt;
  opt.eps = cfg.gradcheck_eps;
  opt.max_per_group = cfg.gradcheck_max_per_group;
  opt.seed = cfg.run.seed;
  opt.abs_floor = cfg.gradcheck_abs_floor;
  const auto rows = gradient_audit(cfg.run.model, std::span(data.train).first(n), opt);
  Table t;
  t.header = {"setting", "group", "checked", "max_rel_err"};
  const GradAuditRow* worst_row = nullptr;
  double worst = 0.0;
  std::size_t kinks = 0;
  for (const GradAuditRow& r : rows) {
    for (const auto& [group, err] : r.result.group_max) {
      t.add({r.setting, group, std::to_string(r.result.group_checked.at(group)), fmt(err, 12)});
    }
    if (!worst_row || r.result.max_rel_err > worst) worst_row = &r;
    worst = std::max(worst, r.result.max_rel_err);
    kinks += r.result.skipped_kinks;
  }
  t.save(out / "gradcheck");
  std::cout << t.to_markdown();
  if (worst_row) {
    const GradCheckResult& w = worst_row->result;
    std::printf("worst: %s %s[%zu] analytic=%.6e numeric=%.6e\n", worst_row->setting.c_str(), w.worst_param.c_str(),
                w.worst_index, w.worst_analytic, w.worst_numeric);
  }
  std::cout << "skipped_kinks=" << kinks << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", worst);
  std::cout << "max_rel_err=" << buf << "\n";
  if (!(worst < cfg.gradcheck_tolerance)) {
    throw NumericalError("gradient check failed: max_rel_err " + std::string(buf) + " >= tolerance " +
                         fmt(cfg.gradcheck_tolerance, 8));
  }
  return 0;
}

// Collects every report.csv below --runs into one summary table.
int cmd_report(const fs::path& out, const Extra& x) {
  const fs::path root = x.runs.empty() ? out : fs::path(x.runs);
  if (!fs::exists(root)) throw IoError("no such directory: " + root.string());
  std::vector<fs::path> found;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "report.csv") found.push_back(e.path());
  }
  std::sort(found.begin(), found.end());
  const std::vector<std::string> keys = {"method",           "task",     "seed", "accuracy", "base_accuracy",
                                         "trainable_params", "flops_train", "flops_expert_reduction_pct"};
  Table t;
  t.header = {"run"};
  t.header.insert(t.header.end(), keys.begin(), keys.end());
  for (const fs::path& p : found) {
    std::map<std::string, std::string> kv;
    std::istringstream in(read_text(p));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos) kv[line.substr(0, comma)] = line.substr(comma + 1);
    }
    std::vector<std::string> row = {fs::relative(p.parent_path(), root).string()};
    for (const std::string& k : keys) row.push_back(kv.count(k) ? kv[k] : "");
    t.add(std::move(row));
  }
  t.save(out / "summary");
  std::cout << t.to_markdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moelab: hot-expert adapter placement on a toy MoE"};
  app.require_subcommand(1);
  Common common;
  Extra extra;
  for (int i = 0; i < argc; ++i) common.command_line += (i ? " " : "") + std::string(argv[i]);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"pretrain", "Pretrain the base model on the task mixture"},
      {"profile", "Warm-up profile of expert activations on the configured task"},
      {"plan", "Build a placement plan from a stored profile"},
      {"finetune", "Fine-tune adapters on the configured task (optionally with a plan)"},
      {"run", "Warm-up, plan and fine-tune end to end"},
      {"ablate", "Sweep one axis (strategy, k, warmup_fraction, targets) over seeds"},
      {"crosstask", "Fine-tune on each task and evaluate on every task"},
      {"flops", "Parameter and adapter FLOPs accounting"},
      {"gradcheck", "Finite-difference gradient audit"},
      {"report", "Summarize report.csv files under a directory"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", common.config, "Config document")->check(CLI::ExistingFile);
    s->add_option("--seed", common.seed, "Run seed (also the only experiment seed)");
    s->add_option("--out-dir", common.out_dir, "Output directory (default runs/<command>)");
    s->add_option("--set", common.sets, "Override one key: section.key=value (repeatable)");
    subs[name] = s;
  }
  for (const char* name : {"profile", "finetune", "run", "ablate", "crosstask", "flops"}) {
    subs[name]->add_option("--base", extra.base, "Base checkpoint (overrides pretrain.checkpoint)");
  }
  subs["plan"]->add_option("--profile", extra.profile, "Profile file written by `profile`");
  for (const char* name : {"plan", "run", "ablate", "crosstask", "flops"}) {
    subs[name]->add_option("--strategy", extra.strategy, "layer_hot|model_hot|cold|random");
    subs[name]->add_option("--k", extra.k, "Hot experts per layer");
  }
  subs["finetune"]->add_option("--plan", extra.plan, "Plan file");
  subs["flops"]->add_option("--plan", extra.plan, "Plan file");
  subs["ablate"]->add_option("--axis", extra.axis, "strategy|k|warmup_fraction|targets");
  subs["ablate"]->add_option("--grid", extra.grid, "Comma-separated grid values");
  subs["report"]->add_option("--runs", extra.runs, "Directory to scan (default: --out-dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::string name;
  for (const auto& [n, s] : subs) {
    if (s->parsed()) name = n;
  }
  try {
    const CliConfig cfg = resolve(common, extra);
    const fs::path out = common.out_dir.empty() ? fs::path("runs") / name : fs::path(common.out_dir);
    record_run(out, cfg, common);
    if (name == "pretrain") return cmd_pretrain(cfg, out);
    if (name == "profile") return cmd_profile(cfg, out);
    if (name == "plan") return cmd_plan(cfg, out, extra);
    if (name == "finetune") return cmd_finetune(cfg, out, extra);
    if (name == "run") return cmd_run(cfg, out);
    if (name == "ablate") return cmd_ablate(cfg, out);
    if (name == "crosstask") return cmd_crosstask(cfg, out);
    if (name == "flops") return cmd_flops(cfg, out, extra);
    if (name == "gradcheck") return cmd_gradcheck(cfg, out);
    if (name == "report") return cmd_report(out, extra);
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
