#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace moelab {

enum class SelectionStrategy { layer_hot, model_hot, cold, random };

std::string to_string(SelectionStrategy s);
SelectionStrategy parse_strategy(const std::string& s);

/// Per-layer hot-expert sets. Each set is sorted ascending and has exactly k
/// members.
struct PlacementPlan {
  std::vector<std::vector<int>> hot;
  std::size_t k = 0;
  SelectionStrategy strategy = SelectionStrategy::layer_hot;
  std::optional<std::uint64_t> seed;

  std::size_t n_layers() const noexcept { return hot.size(); }
  bool contains(std::size_t layer, int expert) const;
  bool operator==(const PlacementPlan&) const = default;
};

// Text form:
//   # strategy=<name> k=<k> seed=<seed|none> layers=<L>
//   <comma-separated experts of layer 0>
//   ...
std::string plan_to_text(const PlacementPlan& plan);
PlacementPlan plan_from_text(const std::string& text);
void save_plan(const std::filesystem::path& path, const PlacementPlan& plan);
PlacementPlan load_plan(const std::filesystem::path& path);

}  // namespace moelab
