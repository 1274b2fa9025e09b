#include "moelab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "moelab/error.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

struct Coord {
  ParamId id;
  std::size_t index;
};

std::uint64_t routing_signature(const RoutingTrace& trace) {
  // FNV-1a over every selection.
  std::uint64_t h = 1469598103934665603ULL;
  for (const LayerRouting& l : trace.layers) {
    for (int e : l.experts) {
      h ^= std::uint64_t(e) + 1;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace

std::string param_group(const std::string& name) {
  if (name.find(".adapter.A") != std::string::npos) return "adapter_A";
  if (name.find(".adapter.B") != std::string::npos) return "adapter_B";
  if (name.find(".adapter.") != std::string::npos) return "adapter_mask";
  if (name.rfind("embed.", 0) == 0) return "embed";
  if (name.rfind("head", 0) == 0) return "head";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".router") != std::string::npos) return "router";
  if (name.find(".expert") != std::string::npos) return "expert";
  if (name.find(".shared") != std::string::npos) return "shared";
  return "other";
}

GradCheckResult finite_diff_check(ParamRegistry& registry, const GradMap& analytic, const LossProbe& probe,
                                  const GradCheckOptions& options) {
  if (!(options.eps > 0.0 && options.eps <= 1e-3)) throw ConfigError("gradcheck eps must be in (0, 1e-3]");

  std::map<std::string, std::vector<Coord>> groups;
  for (ParamId id = 0; id < registry.size(); ++id) {
    const ParamEntry& e = registry.entry(id);
    if (!e.trainable) continue;
    auto& bucket = groups[param_group(e.name)];
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      if (e.mask && (*e.mask)[i] == 0.0) continue;
      bucket.push_back({id, i});
    }
  }

  Rng rng(options.seed);
  GradCheckResult res;
  for (auto& [group, coords] : groups) {
    if (options.max_per_group && coords.size() > options.max_per_group) {
      // Partial Fisher-Yates, then restore registry order for readability.
      for (std::size_t i = 0; i < options.max_per_group; ++i) {
        const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(coords.size() - 1)));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_per_group);
      std::sort(coords.begin(), coords.end(),
                [](const Coord& a, const Coord& b) { return a.id < b.id || (a.id == b.id && a.index < b.index); });
    }
    double group_max = 0.0;
    for (const Coord& c : coords) {
      ParamEntry& e = registry.entry(c.id);
      auto git = analytic.find(e.name);
      if (git == analytic.end()) throw ConfigError("no analytic gradient for trainable " + e.name);
      const double g = git->second[c.index];

      const double orig = e.value[c.index];
      e.value[c.index] = orig + options.eps;
      const auto [f_plus, sig_plus] = probe();
      e.value[c.index] = orig - options.eps;
      const auto [f_minus, sig_minus] = probe();
      e.value[c.index] = orig;
      if (sig_plus != sig_minus) {
        ++res.skipped_kinks;
        continue;
      }

      const double numeric = (f_plus - f_minus) / (2.0 * options.eps);
      const double rel = std::abs(g - numeric) / std::max({std::abs(g), std::abs(numeric), options.abs_floor});
      ++res.checked;
      group_max = std::max(group_max, rel);
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = e.name;
        res.worst_index = c.index;
        res.worst_analytic = g;
        res.worst_numeric = numeric;
      }
    }
    res.group_max[group] = group_max;
    res.group_checked[group] = coords.size();
  }
  return res;
}

GradCheckResult finite_diff_check(MoEModel& model, const Batch& batch, const LossSpec& loss,
                                  const GradCheckOptions& options) {
  const LossAndGrads analytic = forward_backward(model, batch, loss);
  const LossProbe probe = [&]() {
    const ForwardResult r = model.forward(batch, loss);
    return std::pair<double, std::uint64_t>{r.loss, routing_signature(r.trace)};
  };
  return finite_diff_check(model.params(), analytic.grads, probe, options);
}

}  // namespace moelab
