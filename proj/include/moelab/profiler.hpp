#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "moelab/plan.hpp"
#include "moelab/routing.hpp"

namespace moelab {

/// Per-layer count of discrete top-k selections of each routed expert.
struct ActivationProfile {
  std::vector<std::vector<std::uint64_t>> counts;  // [layer][expert]
  std::uint64_t tokens_seen = 0;
  std::size_t k_route = 0;
  std::string source;

  static ActivationProfile empty(std::size_t n_layers, std::size_t n_experts, std::size_t k_route,
                                 std::string source = {});
  std::size_t n_layers() const noexcept { return counts.size(); }
  std::size_t n_experts() const noexcept { return counts.empty() ? 0 : counts.front().size(); }
  /// Σ_i counts[l][i] == tokens_seen · k_route on every layer.
  bool conserved() const;
  bool operator==(const ActivationProfile&) const = default;
};

/// Adds one count per selection event in `trace`. ConfigError on an
/// architecture mismatch.
void record(ActivationProfile& profile, const RoutingTrace& trace);

/// Builds a plan of k experts per layer. Ties go to the lower expert index;
/// random draws a seeded uniform k-subset per layer (seed required).
PlacementPlan select(const ActivationProfile& profile, std::size_t k, SelectionStrategy strategy,
                     std::optional<std::uint64_t> seed = std::nullopt);

struct JaccardResult {
  std::vector<double> per_layer;
  double mean = 0.0;
};

JaccardResult jaccard(const PlacementPlan& a, const PlacementPlan& b);
/// Σ_l |partial ∩ full| / Σ_l |full|, as a percentage.
double coverage(const PlacementPlan& partial, const PlacementPlan& full);

/// Per-layer share of selections taken by the top `fraction` of experts,
/// divided by `fraction` (1.0 means uniform).
std::vector<double> top_share_ratio(const ActivationProfile& profile, double fraction);
/// The same ratio computed on counts summed over layers.
double pooled_top_share_ratio(const ActivationProfile& profile, double fraction);

/// CSV `layer,expert,count,ratio`, rows sorted by (layer, expert).
void export_heatmap(const ActivationProfile& profile, const std::filesystem::path& path);
/// Reads counts back from a heatmap CSV (tokens_seen is not stored).
ActivationProfile import_heatmap(const std::filesystem::path& path);

/// Full-fidelity profile file (counts, tokens_seen, k_route, source).
void save_profile(const std::filesystem::path& path, const ActivationProfile& profile);
ActivationProfile load_profile(const std::filesystem::path& path);

}  // namespace moelab
