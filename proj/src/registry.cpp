#include "moelab/registry.hpp"

#include "moelab/error.hpp"

namespace moelab {

ParamId ParamRegistry::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  const ParamId id = entries_.size();
  index_.emplace(name, id);
  entries_.push_back(ParamEntry{std::move(name), std::move(value), trainable, std::nullopt});
  return id;
}

ParamId ParamRegistry::id(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::optional<ParamId> ParamRegistry::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void ParamRegistry::set_trainable(ParamId id, bool trainable) {
  ParamEntry& e = entries_.at(id);
  e.trainable = trainable;
  if (!trainable) e.mask.reset();
}

void ParamRegistry::set_mask(ParamId id, Tensor mask) {
  ParamEntry& e = entries_.at(id);
  if (!e.trainable) throw ConfigError("mask on frozen parameter: " + e.name);
  if (mask.shape() != e.value.shape()) {
    throw ConfigError("mask shape " + shape_to_string(mask.shape()) + " does not match " + e.name + " " +
                      shape_to_string(e.value.shape()));
  }
  for (double m : mask.values()) {
    if (m != 0.0 && m != 1.0) throw ConfigError("mask for " + e.name + " is not binary");
  }
  e.mask = std::move(mask);
}

void ParamRegistry::freeze_all() {
  for (ParamEntry& e : entries_) {
    e.trainable = false;
    e.mask.reset();
  }
}

std::size_t ParamRegistry::trainable_coordinates() const {
  std::size_t n = 0;
  for (const ParamEntry& e : entries_) {
    if (!e.trainable) continue;
    if (!e.mask) {
      n += e.value.numel();
      continue;
    }
    for (double m : e.mask->values()) n += (m != 0.0);
  }
  return n;
}

std::vector<std::string> ParamRegistry::trainable_names() const {
  std::vector<std::string> out;
  for (const ParamEntry& e : entries_) {
    if (e.trainable) out.push_back(e.name);
  }
  return out;
}

}  // namespace moelab
