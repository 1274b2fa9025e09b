#include "moelab/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/error.hpp"
#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

constexpr double kInitStd = 0.02;

std::string adapter_name(const std::string& target, char part) { return target + ".adapter." + part; }

}  // namespace

void TargetSet::validate() const {
  if (!attention && !gate && experts == ExpertTargets::none) throw ConfigError("target set enables nothing");
}

TargetSet parse_targets(const std::string& s, ExpertTargets experts) {
  if (s == "all") return TargetSet::all_targets(experts);
  if (s == "gate") return TargetSet::plus_gate(experts);
  if (s == "pure") return TargetSet::pure(experts);
  if (s == "attention") return TargetSet::attention_only();
  throw ConfigError("unknown targets: " + s + " (expected all|gate|pure|attention)");
}

std::string targets_name(const TargetSet& t) {
  if (t.attention && t.gate) return "all";
  if (!t.attention && t.gate) return "gate";
  if (!t.attention && !t.gate) return "pure";
  return "attention";
}

void Scheme::validate() const {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("sparse density must be in (0, 1]");
}

std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::lora:
      return "lora";
    case SchemeKind::lori_d:
      return "lori_d";
    case SchemeKind::lori_s:
      return "lori_s";
  }
  return "lora";
}

SchemeKind parse_scheme(const std::string& s) {
  if (s == "lora") return SchemeKind::lora;
  if (s == "lori_d") return SchemeKind::lori_d;
  if (s == "lori_s") return SchemeKind::lori_s;
  throw ConfigError("unknown scheme: " + s + " (expected lora|lori_d|lori_s)");
}

Tensor adapted_forward(const Tensor& x, const Tensor& w, const AdapterPair& adapter) {
  const std::size_t n = x.rows(), d_in = w.rows(), d_out = w.cols(), r = adapter.rank;
  if (x.cols() != d_in || adapter.a.rows() != d_in || adapter.a.cols() != r || adapter.b.rows() != r ||
      adapter.b.cols() != d_out) {
    throw ConfigError("adapted_forward: inconsistent shapes");
  }
  Tensor h({n, d_out});
  kernels::matmul(x.span(), w.span(), h.span(), n, d_in, d_out);
  Tensor b_eff = adapter.b;
  if (adapter.mask) {
    for (std::size_t i = 0; i < b_eff.numel(); ++i) b_eff[i] *= (*adapter.mask)[i];
  }
  Tensor xa({n, r});
  kernels::matmul(x.span(), adapter.a.span(), xa.span(), n, d_in, r);
  Tensor delta({n, d_out});
  kernels::matmul(xa.span(), b_eff.span(), delta.span(), n, r, d_out);
  const double s = adapter.scale();
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] += s * delta[i];
  return h;
}

AdapterPair adapter_pair(const MoEModel& model, const Linear& lin, double alpha) {
  if (!lin.adapter) throw ConfigError("no adapter attached to " + lin.target);
  const ParamRegistry& p = model.params();
  AdapterPair out;
  out.a = p.value(lin.adapter->a);
  out.b = p.value(lin.adapter->b);
  if (lin.adapter->mask) out.mask = p.value(*lin.adapter->mask);
  out.rank = lin.adapter->rank;
  out.alpha = alpha;
  out.a_frozen = !p.entry(lin.adapter->a).trainable;
  return out;
}

void attach(MoEModel& model, const AttachOptions& opt) {
  opt.targets.validate();
  opt.scheme.validate();
  const ModelConfig& cfg = model.config();
  if (opt.rank == 0) throw ConfigError("adapter rank must be >= 1");
  if (!(opt.alpha > 0.0)) throw ConfigError("adapter alpha must be > 0");
  if (opt.targets.experts == ExpertTargets::plan) {
    if (!opt.plan) throw ConfigError("expert targets = plan but no plan given");
    if (opt.plan->n_layers() != cfg.n_layers) {
      throw ConfigError("plan covers " + std::to_string(opt.plan->n_layers()) + " layers, model has " +
                        std::to_string(cfg.n_layers));
    }
    for (const auto& layer : opt.plan->hot) {
      for (int e : layer) {
        if (e < 0 || std::size_t(e) >= cfg.n_experts) {
          throw ConfigError("plan references expert " + std::to_string(e) + " >= n_experts");
        }
      }
    }
  }

  // Decide targets first so nothing is registered on a failed attach.
  std::vector<Linear*> chosen;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    MoEBlock& blk = model.blocks()[l];
    if (opt.targets.attention) {
      for (Linear* lin : {&blk.q, &blk.k, &blk.v, &blk.o}) chosen.push_back(lin);
    }
    if (opt.targets.gate) chosen.push_back(&blk.router);
    if (opt.targets.experts != ExpertTargets::none) {
      for (std::size_t e = 0; e < blk.experts.size(); ++e) {
        if (opt.targets.experts == ExpertTargets::plan && !opt.plan->contains(l, int(e))) continue;
        chosen.push_back(&blk.experts[e].up);
        chosen.push_back(&blk.experts[e].down);
      }
      for (ExpertFFN& s : blk.shared) {
        chosen.push_back(&s.up);
        chosen.push_back(&s.down);
      }
    }
  }
  for (const Linear* lin : chosen) {
    if (lin->adapter) throw ConfigError("adapter already attached to " + lin->target);
    if (opt.rank > std::min(lin->d_in, lin->d_out)) {
      throw ConfigError("rank " + std::to_string(opt.rank) + " exceeds min(d_in, d_out) of " + lin->target);
    }
  }

  ParamRegistry& params = model.params();
  params.freeze_all();
  Rng rng(opt.seed);
  for (Linear* lin : chosen) {
    Tensor a({lin->d_in, opt.rank});
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.normal(0.0, kInitStd);
    Adapter ad;
    ad.rank = opt.rank;
    ad.scale = opt.alpha / double(opt.rank);
    ad.a = params.add(adapter_name(lin->target, 'A'), std::move(a), true);
    ad.b = params.add(adapter_name(lin->target, 'B'), Tensor::zeros({opt.rank, lin->d_out}), true);
    lin->adapter = ad;
  }
}

std::size_t mask_count(std::size_t n, double density) {
  if (!(density > 0.0 && density <= 1.0)) throw ConfigError("mask density must be in (0, 1]");
  const double x = density * double(n);
  const double nearest = std::round(x);
  const double count = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::min(n, std::max<std::size_t>(1, std::size_t(count)));
}

Tensor build_mask(const Tensor& b_ref, double density) {
  const std::size_t n = b_ref.numel();
  const std::size_t keep = mask_count(n, density);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(keep), order.end(), [&](std::size_t a, std::size_t b) {
    const double va = std::abs(b_ref[a]), vb = std::abs(b_ref[b]);
    return va > vb || (va == vb && a < b);
  });
  Tensor mask(b_ref.shape(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1.0;
  return mask;
}

void install_sparse_masks(MoEModel& model, const NamedTensors& dense_phase, double density) {
  std::map<std::string, const Tensor*> lookup;
  for (const auto& [name, t] : dense_phase) lookup[name] = &t;
  ParamRegistry& params = model.params();
  model.for_each_linear([&](Linear& lin) {
    if (!lin.adapter) return;
    const std::string a_name = adapter_name(lin.target, 'A'), b_name = adapter_name(lin.target, 'B');
    auto a_it = lookup.find(a_name);
    auto b_it = lookup.find(b_name);
    if (a_it == lookup.end() || b_it == lookup.end()) {
      throw ConfigError("dense-phase artifacts missing adapter for " + lin.target);
    }
    Tensor& a = params.value(lin.adapter->a);
    Tensor& b = params.value(lin.adapter->b);
    if (a_it->second->shape() != a.shape() || b_it->second->shape() != b.shape()) {
      throw ConfigError("dense-phase adapter shape mismatch for " + lin.target);
    }
    a = *a_it->second;
    b.fill(0.0);
    Tensor mask = build_mask(*b_it->second, density);
    const std::string m_name = adapter_name(lin.target, 'M');
    if (auto existing = params.find(m_name)) {
      params.value(*existing) = std::move(mask);
      lin.adapter->mask = *existing;
    } else {
      lin.adapter->mask = params.add(m_name, std::move(mask), false);
    }
  });
}

ParamRegistry& set_trainability(MoEModel& model, const Scheme& scheme) {
  scheme.validate();
  ParamRegistry& params = model.params();
  // Check before mutating.
  bool any = false;
  model.for_each_linear([&](const Linear& lin) {
    if (!lin.adapter) return;
    any = true;
    if (scheme.kind == SchemeKind::lori_s && !lin.adapter->mask) {
      throw ConfigError("lori_s requires a mask for " + lin.target + " (run the dense phase first)");
    }
  });
  if (!any) throw ConfigError("set_trainability: no adapters attached");
  params.freeze_all();
  model.for_each_linear([&](const Linear& lin) {
    if (!lin.adapter) return;
    params.set_trainable(lin.adapter->a, scheme.kind == SchemeKind::lora);
    params.set_trainable(lin.adapter->b, true);
    if (scheme.kind == SchemeKind::lori_s) params.set_mask(lin.adapter->b, params.value(*lin.adapter->mask));
  });
  return params;
}

bool is_adapter_param(const std::string& name) { return name.find(".adapter.") != std::string::npos; }

NamedTensors adapter_snapshot(const MoEModel& model) {
  return snapshot_if(model.params(), [](const std::string& n) { return is_adapter_param(n); });
}

}  // namespace moelab
