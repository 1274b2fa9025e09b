#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

using ParamId = std::size_t;

/// Gradients keyed by canonical parameter name.
using GradMap = std::map<std::string, Tensor>;

struct ParamEntry {
  std::string name;
  Tensor value;
  bool trainable = true;
  /// Binary element mask; only coordinates with mask == 1 may change.
  std::optional<Tensor> mask;
};

/// Owns every named tensor of a model. Iteration follows insertion order,
/// which is fixed by construction code, so it is stable across runs.
class ParamRegistry {
 public:
  ParamId add(std::string name, Tensor value, bool trainable = true);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ParamId id(const std::string& name) const;
  std::optional<ParamId> find(const std::string& name) const;

  ParamEntry& entry(ParamId id) { return entries_.at(id); }
  const ParamEntry& entry(ParamId id) const { return entries_.at(id); }
  ParamEntry& entry(const std::string& name) { return entries_.at(id(name)); }
  const ParamEntry& entry(const std::string& name) const { return entries_.at(id(name)); }

  Tensor& value(ParamId id) { return entries_.at(id).value; }
  const Tensor& value(ParamId id) const { return entries_.at(id).value; }

  std::vector<ParamEntry>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void set_trainable(ParamId id, bool trainable);
  /// Attaches a binary mask; the entry must be trainable and shapes must agree.
  void set_mask(ParamId id, Tensor mask);
  void freeze_all();

  /// Number of coordinates an optimizer may change (mask popcount for masked entries).
  std::size_t trainable_coordinates() const;
  std::vector<std::string> trainable_names() const;

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

}  // namespace moelab
