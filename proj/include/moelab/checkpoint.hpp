#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "moelab/registry.hpp"

namespace moelab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Checkpoint layout:
//
//   moelab-checkpoint 1
//   tensors <N>
//   <name> f64 <d0>x<d1>... <byte offset>      (N lines, manifest order)
//   end
//   <raw little-endian float64 payload, row-major, concatenated in manifest order>
//
// Offsets are relative to the first payload byte.

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// Every registry entry (values only; trainability is not persisted).
NamedTensors snapshot(const ParamRegistry& registry);
/// Entries whose name satisfies `keep`.
template <class Pred>
NamedTensors snapshot_if(const ParamRegistry& registry, Pred keep) {
  NamedTensors out;
  for (const ParamEntry& e : registry.entries()) {
    if (keep(e.name)) out.emplace_back(e.name, e.value);
  }
  return out;
}

/// Copies tensors into existing registry entries; unknown names or shape
/// mismatches raise ConfigError.
void restore(ParamRegistry& registry, const NamedTensors& tensors);

}  // namespace moelab
