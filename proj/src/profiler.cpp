#include "moelab/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "moelab/error.hpp"
#include "moelab/rng.hpp"

namespace moelab {

namespace {

std::vector<int> sorted_prefix(std::vector<int> order, std::size_t k) {
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// Indices ordered by count, ties toward the lower index.
std::vector<int> rank_experts(const std::vector<std::uint64_t>& counts, bool descending) {
  std::vector<int> order(counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return descending ? counts[a] > counts[b] : counts[a] < counts[b];
  });
  return order;
}

void check_comparable(const PlacementPlan& a, const PlacementPlan& b) {
  if (a.n_layers() != b.n_layers()) throw ConfigError("plans cover different layer counts");
  if (a.k != b.k) throw ConfigError("plans have different k");
}

std::size_t intersection_size(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out.size();
}

double top_share(std::vector<std::uint64_t> counts, double fraction) {
  const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (total == 0 || counts.empty()) return 0.0;
  const auto top = std::max<std::size_t>(1, std::size_t(fraction * double(counts.size()) + 0.5));
  std::sort(counts.begin(), counts.end(), std::greater<>());
  const std::uint64_t head = std::accumulate(counts.begin(), counts.begin() + std::ptrdiff_t(top), std::uint64_t{0});
  return (double(head) / double(total)) / (double(top) / double(counts.size()));
}

}  // namespace

// ---- plan (plan.hpp) ----

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::layer_hot:
      return "layer_hot";
    case SelectionStrategy::model_hot:
      return "model_hot";
    case SelectionStrategy::cold:
      return "cold";
    case SelectionStrategy::random:
      return "random";
  }
  return "layer_hot";
}

SelectionStrategy parse_strategy(const std::string& s) {
  if (s == "layer_hot") return SelectionStrategy::layer_hot;
  if (s == "model_hot") return SelectionStrategy::model_hot;
  if (s == "cold") return SelectionStrategy::cold;
  if (s == "random") return SelectionStrategy::random;
  throw ConfigError("unknown strategy: " + s + " (expected layer_hot|model_hot|cold|random)");
}

bool PlacementPlan::contains(std::size_t layer, int expert) const {
  if (layer >= hot.size()) return false;
  return std::binary_search(hot[layer].begin(), hot[layer].end(), expert);
}

std::string plan_to_text(const PlacementPlan& plan) {
  std::ostringstream out;
  out << "# strategy=" << to_string(plan.strategy) << " k=" << plan.k
      << " seed=" << (plan.seed ? std::to_string(*plan.seed) : "none") << " layers=" << plan.n_layers() << '\n';
  for (const auto& layer : plan.hot) {
    for (std::size_t i = 0; i < layer.size(); ++i) out << (i ? "," : "") << layer[i];
    out << '\n';
  }
  return out.str();
}

PlacementPlan plan_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string header;
  if (!std::getline(in, header) || header.rfind("# ", 0) != 0) throw IoError("plan: missing header");
  PlacementPlan plan;
  std::size_t layers = 0;
  bool have_strategy = false, have_k = false, have_layers = false;
  std::istringstream hs(header.substr(2));
  std::string field;
  while (hs >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw IoError("plan: bad header field " + field);
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    try {
      if (key == "strategy") {
        plan.strategy = parse_strategy(val);
        have_strategy = true;
      } else if (key == "k") {
        plan.k = std::stoul(val);
        have_k = true;
      } else if (key == "seed") {
        if (val != "none") plan.seed = std::stoull(val);
      } else if (key == "layers") {
        layers = std::stoul(val);
        have_layers = true;
      } else {
        throw IoError("plan: unknown header field " + key);
      }
    } catch (const std::logic_error&) {
      throw IoError("plan: bad value in header field " + field);
    } catch (const ConfigError& e) {
      throw IoError(std::string("plan: ") + e.what());
    }
  }
  if (!have_strategy || !have_k || !have_layers) throw IoError("plan: incomplete header");
  std::string line;
  while (plan.hot.size() < layers && std::getline(in, line)) {
    std::vector<int> experts;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      try {
        experts.push_back(std::stoi(cell));
      } catch (const std::logic_error&) {
        throw IoError("plan: bad expert index '" + cell + "'");
      }
    }
    if (experts.size() != plan.k) throw IoError("plan: layer " + std::to_string(plan.hot.size()) + " has wrong size");
    if (!std::is_sorted(experts.begin(), experts.end()) ||
        std::adjacent_find(experts.begin(), experts.end()) != experts.end()) {
      throw IoError("plan: layer entries must be strictly increasing");
    }
    plan.hot.push_back(std::move(experts));
  }
  if (plan.hot.size() != layers) throw IoError("plan: expected " + std::to_string(layers) + " layer lines");
  return plan;
}

void save_plan(const std::filesystem::path& path, const PlacementPlan& plan) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << plan_to_text(plan);
  if (!out) throw IoError("failed writing " + path.string());
}

PlacementPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return plan_from_text(ss.str());
}

// ---- profile ----

ActivationProfile ActivationProfile::empty(std::size_t n_layers, std::size_t n_experts, std::size_t k_route,
                                           std::string source) {
  ActivationProfile p;
  p.counts.assign(n_layers, std::vector<std::uint64_t>(n_experts, 0));
  p.k_route = k_route;
  p.source = std::move(source);
  return p;
}

bool ActivationProfile::conserved() const {
  for (const auto& layer : counts) {
    if (std::accumulate(layer.begin(), layer.end(), std::uint64_t{0}) != tokens_seen * k_route) return false;
  }
  return true;
}

void record(ActivationProfile& profile, const RoutingTrace& trace) {
  if (trace.layers.empty()) return;
  if (trace.layers.size() != profile.n_layers() || trace.n_experts != profile.n_experts()) {
    throw ConfigError("profile and routing trace describe different architectures");
  }
  const std::size_t tokens = trace.layers.front().tokens;
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const LayerRouting& lr = trace.layers[l];
    if (lr.tokens != tokens || lr.k != profile.k_route) throw ConfigError("routing trace is inconsistent with profile");
    for (int e : lr.experts) ++profile.counts[l][std::size_t(e)];
  }
  profile.tokens_seen += tokens;
}

PlacementPlan select(const ActivationProfile& profile, std::size_t k, SelectionStrategy strategy,
                     std::optional<std::uint64_t> seed) {
  const std::size_t n = profile.n_experts();
  if (k == 0) throw ConfigError("plan size k must be >= 1");
  if (k > n) throw ConfigError("plan size k=" + std::to_string(k) + " exceeds n_experts=" + std::to_string(n));
  if (strategy == SelectionStrategy::random && !seed) throw ConfigError("random selection requires a seed");

  PlacementPlan plan;
  plan.k = k;
  plan.strategy = strategy;
  if (strategy == SelectionStrategy::random) plan.seed = seed;

  switch (strategy) {
    case SelectionStrategy::layer_hot:
      for (const auto& layer : profile.counts) plan.hot.push_back(sorted_prefix(rank_experts(layer, true), k));
      break;
    case SelectionStrategy::cold:
      for (const auto& layer : profile.counts) plan.hot.push_back(sorted_prefix(rank_experts(layer, false), k));
      break;
    case SelectionStrategy::model_hot: {
      std::vector<std::uint64_t> summed(n, 0);
      for (const auto& layer : profile.counts) {
        for (std::size_t i = 0; i < n; ++i) summed[i] += layer[i];
      }
      const std::vector<int> chosen = sorted_prefix(rank_experts(summed, true), k);
      plan.hot.assign(profile.n_layers(), chosen);
      break;
    }
    case SelectionStrategy::random: {
      // One stream across layers: partial Fisher-Yates of 0..n-1 per layer.
      Rng rng(*seed);
      for (std::size_t l = 0; l < profile.n_layers(); ++l) {
        std::vector<int> ids(n);
        std::iota(ids.begin(), ids.end(), 0);
        for (std::size_t i = 0; i < k; ++i) {
          const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(n - 1)));
          std::swap(ids[i], ids[j]);
        }
        plan.hot.push_back(sorted_prefix(std::move(ids), k));
      }
      break;
    }
  }
  return plan;
}

JaccardResult jaccard(const PlacementPlan& a, const PlacementPlan& b) {
  check_comparable(a, b);
  JaccardResult r;
  for (std::size_t l = 0; l < a.n_layers(); ++l) {
    const std::size_t inter = intersection_size(a.hot[l], b.hot[l]);
    const std::size_t uni = a.hot[l].size() + b.hot[l].size() - inter;
    r.per_layer.push_back(uni ? double(inter) / double(uni) : 1.0);
  }
  if (!r.per_layer.empty()) {
    r.mean = std::accumulate(r.per_layer.begin(), r.per_layer.end(), 0.0) / double(r.per_layer.size());
  }
  return r;
}

double coverage(const PlacementPlan& partial, const PlacementPlan& full) {
  check_comparable(partial, full);
  std::size_t hit = 0, total = 0;
  for (std::size_t l = 0; l < full.n_layers(); ++l) {
    hit += intersection_size(partial.hot[l], full.hot[l]);
    total += full.hot[l].size();
  }
  return total ? 100.0 * double(hit) / double(total) : 100.0;
}

std::vector<double> top_share_ratio(const ActivationProfile& profile, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("top-share fraction must be in (0, 1]");
  std::vector<double> out;
  for (const auto& layer : profile.counts) out.push_back(top_share(layer, fraction));
  return out;
}

double pooled_top_share_ratio(const ActivationProfile& profile, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("top-share fraction must be in (0, 1]");
  std::vector<std::uint64_t> summed(profile.n_experts(), 0);
  for (const auto& layer : profile.counts) {
    for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += layer[i];
  }
  return top_share(std::move(summed), fraction);
}

void export_heatmap(const ActivationProfile& profile, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "layer,expert,count,ratio\n";
  char buf[64];
  for (std::size_t l = 0; l < profile.n_layers(); ++l) {
    const auto& layer = profile.counts[l];
    const std::uint64_t total = std::accumulate(layer.begin(), layer.end(), std::uint64_t{0});
    for (std::size_t e = 0; e < layer.size(); ++e) {
      const double ratio = total ? double(layer[e]) / double(total) : 0.0;
      std::snprintf(buf, sizeof buf, "%.17g", ratio);
      out << l << ',' << e << ',' << layer[e] << ',' << buf << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ActivationProfile import_heatmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "layer,expert,count,ratio") throw IoError("bad heatmap header in " + path.string());
  ActivationProfile p;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& cell : f) {
      if (!std::getline(ls, cell, ',')) throw IoError("bad heatmap row: " + line);
    }
    std::size_t l = 0, e = 0;
    std::uint64_t c = 0;
    try {
      l = std::stoul(f[0]);
      e = std::stoul(f[1]);
      c = std::stoull(f[2]);
    } catch (const std::logic_error&) {
      throw IoError("bad heatmap row: " + line);
    }
    if (l == p.counts.size()) {
      p.counts.emplace_back();
    } else if (l + 1 != p.counts.size()) {
      throw IoError("heatmap rows out of order");
    }
    if (e != p.counts[l].size()) throw IoError("heatmap rows out of order");
    p.counts[l].push_back(c);
  }
  for (const auto& layer : p.counts) {
    if (layer.size() != p.counts.front().size()) throw IoError("heatmap layers have different expert counts");
  }
  return p;
}

void save_profile(const std::filesystem::path& path, const ActivationProfile& profile) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "moelab-profile 1\n";
  out << "source " << (profile.source.empty() ? "-" : profile.source) << '\n';
  out << "tokens_seen " << profile.tokens_seen << '\n';
  out << "k_route " << profile.k_route << '\n';
  out << "shape " << profile.n_layers() << ' ' << profile.n_experts() << '\n';
  for (const auto& layer : profile.counts) {
    for (std::size_t i = 0; i < layer.size(); ++i) out << (i ? " " : "") << layer[i];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ActivationProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string magic, tag;
  int version = 0;
  ActivationProfile p;
  std::size_t layers = 0, experts = 0;
  in >> magic >> version;
  if (magic != "moelab-profile" || version != 1) throw IoError("not a profile file: " + path.string());
  // The source label runs to the end of its line and may contain spaces.
  in >> tag;
  if (tag != "source") throw IoError("profile: expected source");
  std::getline(in >> std::ws, p.source);
  if (p.source == "-") p.source.clear();
  in >> tag >> p.tokens_seen;
  if (tag != "tokens_seen") throw IoError("profile: expected tokens_seen");
  in >> tag >> p.k_route;
  if (tag != "k_route") throw IoError("profile: expected k_route");
  in >> tag >> layers >> experts;
  if (tag != "shape" || !in) throw IoError("profile: expected shape");
  p.counts.assign(layers, std::vector<std::uint64_t>(experts, 0));
  for (auto& layer : p.counts) {
    for (auto& c : layer) in >> c;
  }
  if (!in) throw IoError("profile: truncated counts in " + path.string());
  return p;
}

}  // namespace moelab
