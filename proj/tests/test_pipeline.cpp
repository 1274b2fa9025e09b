#include <gtest/gtest.h>

#include <filesystem>

#include "helpers.hpp"
#include "moelab/error.hpp"
#include "moelab/pipeline.hpp"
#include "moelab/rng.hpp"
#include "moelab/training.hpp"

using namespace moelab;
namespace fs = std::filesystem;

namespace {

BaseModel tiny_base() {
  const ModelConfig cfg = moelab::testing::tiny_config();
  return BaseModel{cfg, snapshot(MoEModel(cfg, 21).params())};
}

RunConfig tiny_run(const BaseModel& base) {
  RunConfig c;
  c.model = base.config;
  c.task = TaskSpec::defaults(TaskKind::mod_add, 4);
  c.task.n_train = 64;
  c.task.n_test = 32;
  c.k = 2;
  c.rank = 2;
  c.epochs = 1;
  c.warmup_pct = 25;
  return c;
}

bool same_adapters(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || !bitwise_equal(a[i].second, b[i].second)) return false;
  }
  return true;
}

}  // namespace

TEST(Pipeline, ZeroEpochsLeavesTheBaseUntouched) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  cfg.epochs = 0;
  cfg.targets = TargetSet::all_targets(ExpertTargets::all);
  const TrainReport r = finetune(base, make_task(cfg.task), nullptr, cfg);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_EQ(r.accuracy, r.base_accuracy);
}

TEST(Pipeline, SameSeedGivesBitwiseIdenticalAdapters) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  const TaskData data = make_task(cfg.task);
  const TrainReport a = run_end_to_end(base, cfg), b = run_end_to_end(base, cfg);
  EXPECT_TRUE(same_adapters(a.adapters, b.adapters));
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.plan, b.plan);
  cfg.seed = 1;
  EXPECT_FALSE(same_adapters(a.adapters, run_end_to_end(base, cfg).adapters));
}

TEST(Pipeline, EndToEndEqualsExplicitWarmupPlanFinetune) {
  const BaseModel base = tiny_base();
  const RunConfig cfg = tiny_run(base);
  const TaskData data = make_task(cfg.task);
  const WarmupResult w = run_warmup(base, data, cfg);
  const PlacementPlan plan = build_plan(w.profile, cfg);
  const TrainReport direct = finetune(base, data, &plan, cfg);
  const TrainReport e2e = run_end_to_end(base, cfg);
  // Warm-up adapters are discarded: fine-tuning starts from the same fresh state.
  EXPECT_TRUE(same_adapters(direct.adapters, e2e.adapters));
  EXPECT_EQ(direct.initial_loss, e2e.initial_loss);
  EXPECT_EQ(e2e.warmup_steps, w.steps);
}

TEST(Pipeline, WarmupAccounting) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  const TaskData data = make_task(cfg.task);
  const WarmupResult w = run_warmup(base, data, cfg);
  EXPECT_EQ(w.subset_size, 16u);
  EXPECT_EQ(w.finetune_steps, 4u);
  EXPECT_EQ(w.steps, 1u);
  EXPECT_DOUBLE_EQ(w.overhead, 0.25);
  EXPECT_TRUE(w.profile.conserved());

  cfg.warmup_pct = 100;
  const WarmupResult full1 = run_warmup(base, data, cfg), full2 = run_warmup(base, data, cfg);
  EXPECT_EQ(full1.profile, full2.profile);
  EXPECT_EQ(full1.subset_size, data.train.size());

  cfg.warmup_pct = 0.5;  // 0.32 examples
  EXPECT_THROW(run_warmup(base, data, cfg), ConfigError);
  cfg.warmup_pct = 0;
  EXPECT_THROW(run_warmup(base, data, cfg), ConfigError);

  cfg.warmup_pct = 50;
  cfg.profile_forward_only = true;
  const WarmupResult fwd = run_warmup(base, data, cfg);
  EXPECT_EQ(fwd.steps, 0u);
  EXPECT_TRUE(fwd.profile.conserved());
}

TEST(Pipeline, ReportInvariants) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  const TrainReport r = run_end_to_end(base, cfg);
  ASSERT_TRUE(r.plan.has_value());
  EXPECT_EQ(r.cold_experts_checked, base.config.n_layers * (base.config.n_experts - cfg.k));
  EXPECT_EQ(r.params.trainable, r.closed_form_trainable);
  EXPECT_EQ(r.flops.train, 3 * r.flops.forward);
  EXPECT_LE(r.flops.expert_forward, r.flops.baseline_expert_forward);
  EXPECT_GE(r.exec.hit_rate(), 0.0);
  EXPECT_LE(r.exec.hit_rate(), 1.0);
}

TEST(Pipeline, SparseSchemeNeedsDensePhase) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  cfg.targets = TargetSet::all_targets(ExpertTargets::all);
  cfg.scheme.kind = SchemeKind::lori_s;
  const TaskData data = make_task(cfg.task);
  EXPECT_THROW(finetune(base, data, nullptr, cfg), ConfigError);

  const TrainReport r = run_end_to_end(base, cfg);
  EXPECT_EQ(r.params.trainable, r.closed_form_trainable);
  std::size_t masks = 0;
  for (const auto& [name, t] : r.adapters) masks += name.ends_with(".adapter.M");
  EXPECT_GT(masks, 0u);
}

TEST(Pipeline, ArtifactsAndDensePhaseCache) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  cfg.scheme.kind = SchemeKind::lori_s;
  cfg.out_dir = fs::temp_directory_path() / "moelab_test_pipeline";
  fs::remove_all(cfg.out_dir);
  const TrainReport first = run_end_to_end(base, cfg);
  for (const char* f : {"report.csv", "report.md", "adapters.ckpt", "plan.txt", "profile.txt", "heatmap.csv",
                        "dense_phase/adapters.ckpt"}) {
    EXPECT_TRUE(fs::exists(cfg.out_dir / f)) << f;
  }
  EXPECT_EQ(load_plan(cfg.out_dir / "plan.txt"), *first.plan);
  const TrainReport second = run_end_to_end(base, cfg);
  EXPECT_TRUE(same_adapters(first.adapters, second.adapters));
  fs::remove_all(cfg.out_dir);
}

TEST(Pipeline, FullWarmupFractionReproducesTheFullPlan) {
  const BaseModel base = tiny_base();
  const RunConfig cfg = tiny_run(base);
  const std::vector<std::uint64_t> seeds = {0, 1};
  const AblationResult r = ablate(base, cfg, AblationAxis::warmup_fraction, {"100"}, seeds);
  ASSERT_EQ(r.rows.size(), 2u);
  for (const AblationRow& row : r.rows) {
    ASSERT_TRUE(row.jaccard.has_value());
    EXPECT_DOUBLE_EQ(*row.jaccard, 1.0);
    EXPECT_DOUBLE_EQ(*row.coverage, 100.0);
  }
  EXPECT_THROW(ablate(base, cfg, AblationAxis::k, {"0"}, seeds), ConfigError);
  EXPECT_THROW(ablate(base, cfg, AblationAxis::strategy, {}, seeds), ConfigError);
}

TEST(Pipeline, CrossTaskShapes) {
  const BaseModel base = tiny_base();
  const RunConfig cfg = tiny_run(base);
  std::vector<TaskSpec> tasks;
  for (TaskKind k : {TaskKind::mod_add, TaskKind::refusal}) {
    TaskSpec s = TaskSpec::defaults(k, 4);
    s.n_train = 32;
    s.n_test = 16;
    tasks.push_back(s);
  }
  const std::vector<std::uint64_t> seeds = {0};
  const CrossTaskResult r = cross_task_matrix(base, cfg, tasks, seeds);
  EXPECT_EQ(r.cells.size(), 4u);
  ASSERT_EQ(r.plans.size(), 1u);
  EXPECT_EQ(r.plans[0].size(), 2u);
  for (const CrossTaskCell& c : r.cells) {
    EXPECT_GE(c.after, 0.0);
    EXPECT_LE(c.after, 1.0);
  }
}

TEST(Pipeline, GradientAuditPassesOnTinyModel) {
  const ModelConfig cfg = moelab::testing::tiny_config();
  const auto batch = moelab::testing::random_examples(3, 2, 4, 8, int(cfg.vocab));
  GradCheckOptions opt;
  opt.max_per_group = 40;
  const std::vector<GradAuditRow> rows = gradient_audit(cfg, batch, opt);
  ASSERT_EQ(rows.size(), 4u);
  for (const GradAuditRow& r : rows) {
    EXPECT_GT(r.result.checked, 0u) << r.setting;
    EXPECT_LT(r.result.max_rel_err, 1e-4) << r.setting;
  }
}

TEST(Pipeline, FineTuneStartsFromTheUntouchedBaseLoss) {
  const BaseModel base = tiny_base();
  const RunConfig cfg = tiny_run(base);
  const TaskData data = make_task(cfg.task);
  const TrainReport r = run_end_to_end(base, cfg);
  // Replays the fine-tune's first batch (data-order stream salt 2) on the
  // bare base model: zero-initialized adapters leave the loss unchanged.
  MoEModel plain = instantiate(base);
  TrainOptions topt;
  topt.steps = 1;
  topt.batch_size = cfg.batch_size;
  topt.loss = LossSpec{false, LbMode::off, 0.0};
  topt.seed = mix_seed(cfg.seed, 2);
  double first = 0.0;
  train(plain, data.train, topt, [&](std::size_t, const LossAndGrads& lg) { first = lg.loss; });
  EXPECT_EQ(r.initial_loss, first);
}

TEST(Pipeline, ZeroEpochCrossTaskLeavesEveryScore) {
  const BaseModel base = tiny_base();
  RunConfig cfg = tiny_run(base);
  cfg.epochs = 0;
  std::vector<TaskSpec> tasks;
  for (TaskKind k : {TaskKind::mod_add, TaskKind::transduce}) {
    TaskSpec s = TaskSpec::defaults(k, 2);
    s.n_train = 32;
    s.n_test = 16;
    tasks.push_back(s);
  }
  const std::vector<std::uint64_t> seeds = {0};
  const CrossTaskResult r = cross_task_matrix(base, cfg, tasks, seeds);
  for (const CrossTaskCell& c : r.cells) EXPECT_EQ(c.after, c.before);
}
