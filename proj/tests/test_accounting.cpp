#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"
#include "moelab/accounting.hpp"
#include "moelab/error.hpp"

using namespace moelab;
using moelab::testing::random_tensor;
using moelab::testing::tiny_config;

namespace {

PlacementPlan plan_of(std::size_t layers, std::vector<int> hot) {
  PlacementPlan p;
  p.k = hot.size();
  p.hot.assign(layers, std::move(hot));
  return p;
}

MoEModel adapted(const ModelConfig& cfg, const TargetSet& t, const PlacementPlan* plan, const Scheme& scheme,
                 std::size_t rank) {
  MoEModel m(cfg, 1);
  AttachOptions ao;
  ao.targets = t;
  ao.plan = plan;
  ao.scheme = scheme;
  ao.rank = rank;
  attach(m, ao);
  if (scheme.kind == SchemeKind::lori_s) {
    NamedTensors dense = adapter_snapshot(m);
    std::uint64_t s = 0;
    for (auto& [name, tensor] : dense) tensor = random_tensor(++s, tensor.shape());
    install_sparse_masks(m, dense, scheme.density);
  }
  set_trainability(m, scheme);
  return m;
}

// One routing layer from explicit per-token selections.
LayerRouting layer(std::vector<std::vector<int>> sel) {
  LayerRouting lr;
  lr.tokens = sel.size();
  lr.k = sel.front().size();
  for (const auto& s : sel) {
    for (int e : s) {
      lr.experts.push_back(e);
      lr.weights.push_back(1.0 / double(lr.k));
    }
  }
  return lr;
}

}  // namespace

TEST(Accounting, DefaultPerLayerCountsByHand) {
  const ModelConfig cfg = ModelConfig::desk_default();
  // attention 4·4·(32+32) + gate 4·(32+16) + 16 experts · (4·(32+64) + 4·(64+32))
  const std::uint64_t per_layer_all = 4 * 4 * 64 + 4 * 48 + 16 * 2 * 4 * 96;
  EXPECT_EQ(per_layer_all, 13504u);
  EXPECT_EQ(closed_form_trainable(cfg, TargetSet::all_targets(ExpertTargets::all), nullptr, Scheme{}, 4),
            cfg.n_layers * per_layer_all);
  const PlacementPlan plan = plan_of(cfg.n_layers, {0, 3, 7, 9});
  const std::uint64_t per_layer_plan = 4 * 4 * 64 + 4 * 48 + 4 * 2 * 4 * 96;
  EXPECT_EQ(per_layer_plan, 4288u);
  EXPECT_EQ(closed_form_trainable(cfg, TargetSet::all_targets(ExpertTargets::plan), &plan, Scheme{}, 4),
            cfg.n_layers * per_layer_plan);
}

TEST(Accounting, ClosedFormMatchesRegistryEnumeration) {
  for (ModelConfig cfg : {ModelConfig::desk_default(), ModelConfig::shared_preset()}) {
    const PlacementPlan plan = plan_of(cfg.n_layers, {1, 2, 5, 11});
    for (ExpertTargets e : {ExpertTargets::all, ExpertTargets::plan, ExpertTargets::none}) {
      for (SchemeKind kind : {SchemeKind::lora, SchemeKind::lori_d, SchemeKind::lori_s}) {
        const TargetSet t = TargetSet::all_targets(e);
        Scheme scheme;
        scheme.kind = kind;
        const MoEModel m = adapted(cfg, t, &plan, scheme, 4);
        std::map<std::string, std::uint64_t> groups;
        const std::uint64_t cf = closed_form_trainable(cfg, t, &plan, scheme, 4, &groups);
        const ParamReport r = count_params(m);
        EXPECT_EQ(cf, r.trainable) << to_string(kind);
        for (const auto& [g, n] : r.per_group) EXPECT_EQ(groups[g], n) << g;
        EXPECT_EQ(r.base_total, count_params(MoEModel(cfg, 1)).base_total);
      }
    }
  }
}

TEST(Accounting, OrderingAcrossTargetsAndK) {
  const ModelConfig cfg = ModelConfig::desk_default();
  std::uint64_t prev = 0;
  for (std::size_t k = 1; k <= cfg.n_experts; ++k) {
    std::vector<int> hot(k);
    std::iota(hot.begin(), hot.end(), 0);
    const PlacementPlan plan = plan_of(cfg.n_layers, hot);
    const std::uint64_t pure = closed_form_trainable(cfg, TargetSet::pure(), &plan, Scheme{}, 4);
    const std::uint64_t gate = closed_form_trainable(cfg, TargetSet::plus_gate(), &plan, Scheme{}, 4);
    const std::uint64_t all = closed_form_trainable(cfg, TargetSet::all_targets(), &plan, Scheme{}, 4);
    EXPECT_LT(pure, gate);
    EXPECT_LT(gate, all);
    EXPECT_GT(all, prev);
    prev = all;
  }
  Scheme d, s;
  d.kind = SchemeKind::lori_d;
  s.kind = SchemeKind::lori_s;
  const TargetSet t = TargetSet::all_targets(ExpertTargets::all);
  EXPECT_LT(closed_form_trainable(cfg, t, nullptr, s, 4), closed_form_trainable(cfg, t, nullptr, d, 4));
  EXPECT_LT(closed_form_trainable(cfg, t, nullptr, d, 4), closed_form_trainable(cfg, t, nullptr, Scheme{}, 4));
  EXPECT_THROW(closed_form_trainable(cfg, TargetSet::pure(), nullptr, Scheme{}, 4), ConfigError);
}

TEST(Accounting, TracedFlopsByHand) {
  const ModelConfig cfg = tiny_config();  // d 8, d_ff 16, 4 experts, top-2
  const PlacementPlan plan = plan_of(cfg.n_layers, {0, 1});
  const MoEModel m = adapted(cfg, TargetSet::all_targets(ExpertTargets::plan), &plan, Scheme{}, 2);
  RoutingTrace trace;
  trace.n_experts = 4;
  trace.layers.push_back(layer({{0, 2}, {1, 0}, {3, 2}}));  // 3 hot selections
  trace.layers.push_back(layer({{2, 3}, {2, 1}, {0, 1}}));  // 3 hot selections
  const FlopsReport r = adapter_flops(trace, m);
  const std::uint64_t r2 = 2, tok = 3;
  const std::uint64_t attn = 2 * tok * 4 * 2 * r2 * (8 + 8);
  const std::uint64_t gate = 2 * tok * 2 * r2 * (8 + 4);
  const std::uint64_t expert_exec = 2 * r2 * (8 + 16) * 2;  // up + down
  EXPECT_EQ(r.tokens, tok);
  EXPECT_EQ(r.attention_forward, attn);
  EXPECT_EQ(r.gate_forward, gate);
  EXPECT_EQ(r.expert_forward, 6 * expert_exec);
  EXPECT_EQ(r.baseline_expert_forward, 12 * expert_exec);
  EXPECT_EQ(r.forward, attn + gate + 6 * expert_exec);
  EXPECT_EQ(r.train, 3 * r.forward);
  EXPECT_DOUBLE_EQ(r.expert_reduction_pct, 50.0);
  EXPECT_EQ(r.executions_per_layer[0], 4 * tok + tok + 3 * 2);

  const ExecCounters c = exec_counters(trace, plan);
  EXPECT_EQ(c.hits, (std::vector<std::uint64_t>{3, 3}));
  EXPECT_EQ(c.activated, (std::vector<std::uint64_t>{6, 6}));
  EXPECT_DOUBLE_EQ(c.hit_rate(), 0.5);

  const FlopsReport twice = accumulate(r, r);
  EXPECT_EQ(twice.forward, 2 * r.forward);
  EXPECT_DOUBLE_EQ(twice.expert_reduction_pct, r.expert_reduction_pct);

  trace.n_experts = 5;
  EXPECT_THROW(adapter_flops(trace, m), ConfigError);
}

TEST(Accounting, PlanNeverCostsMoreThanAllExperts) {
  const ModelConfig cfg = tiny_config();
  const MoEModel base(cfg, 8);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Batch b = make_batch(moelab::testing::random_examples(s, 4, 2, 12, int(cfg.vocab)));
    const RoutingTrace trace = base.forward(b, base.default_loss()).trace;
    const PlacementPlan plan = plan_of(cfg.n_layers, {int(s % 4)});
    const MoEModel m = adapted(cfg, TargetSet::all_targets(ExpertTargets::plan), &plan, Scheme{}, 4);
    const MoEModel full = adapted(cfg, TargetSet::all_targets(ExpertTargets::all), nullptr, Scheme{}, 4);
    const FlopsReport r = adapter_flops(trace, m), f = adapter_flops(trace, full);
    EXPECT_LE(r.expert_forward, r.baseline_expert_forward);
    EXPECT_EQ(r.baseline_forward, f.forward);
    EXPECT_EQ(f.expert_forward, f.baseline_expert_forward);
    EXPECT_GE(r.expert_reduction_pct, 0.0);
  }
}
