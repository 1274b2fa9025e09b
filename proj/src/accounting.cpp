#include "moelab/accounting.hpp"

#include <algorithm>

#include "moelab/error.hpp"

namespace moelab {

namespace {

std::uint64_t adapter_trainable(std::size_t d_in, std::size_t d_out, std::size_t rank, const Scheme& scheme) {
  switch (scheme.kind) {
    case SchemeKind::lora:
      return std::uint64_t(rank) * (d_in + d_out);
    case SchemeKind::lori_d:
      return std::uint64_t(rank) * d_out;
    case SchemeKind::lori_s:
      return mask_count(rank * d_out, scheme.density);
  }
  return 0;
}

std::uint64_t exec_cost(const Linear& lin) {
  return lin.adapter ? 2ULL * lin.adapter->rank * (lin.d_in + lin.d_out) : 0;
}

double reduction(std::uint64_t actual, std::uint64_t baseline) {
  return baseline ? 100.0 * (1.0 - double(actual) / double(baseline)) : 0.0;
}

}  // namespace

std::string target_group(const std::string& target) {
  if (target.find(".attn.") != std::string::npos) return "attention";
  if (target.find(".router") != std::string::npos) return "gate";
  if (target.find(".expert") != std::string::npos) return "expert";
  if (target.find(".shared") != std::string::npos) return "shared";
  return "other";
}

ParamReport count_params(const MoEModel& model) {
  ParamReport r;
  const ParamRegistry& params = model.params();
  for (const ParamEntry& e : params.entries()) {
    if (!is_adapter_param(e.name)) {
      r.base_total += e.value.numel();
      continue;
    }
    if (e.name.ends_with(".adapter.M")) continue;
    r.adapter_total += e.value.numel();
  }
  r.trainable = params.trainable_coordinates();
  model.for_each_linear([&](const Linear& lin) {
    if (!lin.adapter) return;
    TargetParams t{lin.target, target_group(lin.target), lin.d_in, lin.d_out, lin.adapter->rank, 0};
    for (ParamId id : {lin.adapter->a, lin.adapter->b}) {
      const ParamEntry& e = params.entry(id);
      if (!e.trainable) continue;
      if (e.mask) {
        t.trainable += std::uint64_t(std::count(e.mask->values().begin(), e.mask->values().end(), 1.0));
      } else {
        t.trainable += e.value.numel();
      }
    }
    r.per_group[t.group] += t.trainable;
    r.per_target.push_back(std::move(t));
  });
  r.fraction = r.base_total ? double(r.trainable) / double(r.base_total) : 0.0;
  return r;
}

std::uint64_t closed_form_trainable(const ModelConfig& config, const TargetSet& targets, const PlacementPlan* plan,
                                    const Scheme& scheme, std::size_t rank,
                                    std::map<std::string, std::uint64_t>* per_group) {
  targets.validate();
  if (targets.experts == ExpertTargets::plan && (!plan || plan->n_layers() != config.n_layers)) {
    throw ConfigError("closed form: plan must cover every layer");
  }
  const std::size_t d = config.d_model;
  std::map<std::string, std::uint64_t> groups;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    if (targets.attention) groups["attention"] += 4 * adapter_trainable(d, d, rank, scheme);
    if (targets.gate) groups["gate"] += adapter_trainable(d, config.n_experts, rank, scheme);
    if (targets.experts == ExpertTargets::none) continue;
    const std::uint64_t per_expert =
        adapter_trainable(d, config.d_ff, rank, scheme) + adapter_trainable(config.d_ff, d, rank, scheme);
    const std::size_t n_adapted = targets.experts == ExpertTargets::all ? config.n_experts : plan->hot[l].size();
    groups["expert"] += n_adapted * per_expert;
    if (config.n_shared) groups["shared"] += config.n_shared * per_expert;
  }
  std::uint64_t total = 0;
  for (const auto& [name, n] : groups) total += n;
  if (per_group) *per_group = std::move(groups);
  return total;
}

double ExecCounters::hit_rate() const {
  std::uint64_t h = 0, a = 0;
  for (std::size_t l = 0; l < hits.size(); ++l) {
    h += hits[l];
    a += activated[l];
  }
  return a ? double(h) / double(a) : 0.0;
}

ExecCounters exec_counters(const RoutingTrace& trace, const PlacementPlan& plan) {
  if (!trace.layers.empty() && trace.layers.size() != plan.n_layers()) {
    throw ConfigError("trace and plan cover different layer counts");
  }
  ExecCounters c;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    std::uint64_t hits = 0;
    for (int e : trace.layers[l].experts) hits += plan.contains(l, e);
    c.hits.push_back(hits);
    c.activated.push_back(trace.layers[l].experts.size());
  }
  return c;
}

FlopsReport adapter_flops(const RoutingTrace& trace, const MoEModel& model) {
  const ModelConfig& cfg = model.config();
  FlopsReport r;
  r.executions_per_layer.assign(cfg.n_layers, 0);
  if (trace.layers.empty()) return r;
  if (trace.layers.size() != cfg.n_layers || trace.n_experts != cfg.n_experts) {
    throw ConfigError("routing trace does not match the model");
  }
  r.tokens = trace.layers.front().tokens;

  // Baseline rank: the one used by any expert adapter (all share one rank).
  std::size_t expert_rank = 0;
  for (const MoEBlock& blk : model.blocks()) {
    for (const ExpertFFN& e : blk.experts) {
      if (e.up.adapter) expert_rank = e.up.adapter->rank;
    }
    for (const ExpertFFN& e : blk.shared) {
      if (e.up.adapter) expert_rank = e.up.adapter->rank;
    }
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const MoEBlock& blk = model.blocks()[l];
    const LayerRouting& lr = trace.layers[l];
    if (lr.tokens != r.tokens) throw ConfigError("routing trace layers disagree on token count");
    std::uint64_t execs = 0;
    for (const Linear* lin : {&blk.q, &blk.k, &blk.v, &blk.o}) {
      r.attention_forward += r.tokens * exec_cost(*lin);
      execs += lin->adapter ? r.tokens : 0;
    }
    r.gate_forward += r.tokens * exec_cost(blk.router);
    execs += blk.router.adapter ? r.tokens : 0;
    for (const ExpertFFN& s : blk.shared) {
      r.shared_forward += r.tokens * (exec_cost(s.up) + exec_cost(s.down));
      execs += (s.up.adapter ? r.tokens : 0) + (s.down.adapter ? r.tokens : 0);
    }
    for (int e : lr.experts) {
      if (e < 0 || std::size_t(e) >= blk.experts.size()) throw ConfigError("trace references unknown expert");
      const ExpertFFN& ex = blk.experts[std::size_t(e)];
      r.expert_forward += exec_cost(ex.up) + exec_cost(ex.down);
      execs += (ex.up.adapter ? 1 : 0) + (ex.down.adapter ? 1 : 0);
      if (expert_rank) r.baseline_expert_forward += 2ULL * expert_rank * 2 * (cfg.d_model + cfg.d_ff);
    }
    r.executions_per_layer[l] = execs;
  }
  r.forward = r.attention_forward + r.gate_forward + r.expert_forward + r.shared_forward;
  r.train = 3 * r.forward;
  r.baseline_forward = r.attention_forward + r.gate_forward + r.baseline_expert_forward + r.shared_forward;
  r.reduction_pct = reduction(r.forward, r.baseline_forward);
  r.expert_reduction_pct = reduction(r.expert_forward, r.baseline_expert_forward);
  return r;
}

FlopsReport accumulate(const FlopsReport& a, const FlopsReport& b) {
  FlopsReport r = a;
  r.tokens += b.tokens;
  r.forward += b.forward;
  r.train += b.train;
  r.attention_forward += b.attention_forward;
  r.gate_forward += b.gate_forward;
  r.expert_forward += b.expert_forward;
  r.shared_forward += b.shared_forward;
  r.baseline_forward += b.baseline_forward;
  r.baseline_expert_forward += b.baseline_expert_forward;
  if (r.executions_per_layer.size() < b.executions_per_layer.size()) {
    r.executions_per_layer.resize(b.executions_per_layer.size(), 0);
  }
  for (std::size_t l = 0; l < b.executions_per_layer.size(); ++l) r.executions_per_layer[l] += b.executions_per_layer[l];
  r.reduction_pct = reduction(r.forward, r.baseline_forward);
  r.expert_reduction_pct = reduction(r.expert_forward, r.baseline_expert_forward);
  return r;
}

}  // namespace moelab
