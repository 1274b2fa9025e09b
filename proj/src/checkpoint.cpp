#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

namespace {

constexpr const char* kMagic = "moelab-checkpoint 1";

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

Shape parse_shape(const std::string& s) {
  Shape shape;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t x = s.find('x', start);
    const std::string part = s.substr(start, x == std::string::npos ? std::string::npos : x - start);
    if (part.empty()) throw IoError("bad shape in checkpoint manifest: " + s);
    shape.push_back(static_cast<std::size_t>(std::stoull(part)));
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return shape;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());

  out << kMagic << '\n' << "tensors " << tensors.size() << '\n';
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.find_first_of(" \t\n") != std::string::npos) throw ConfigError("tensor name contains whitespace: " + name);
    out << name << " f64 " << shape_to_string(t.shape()) << ' ' << offset << '\n';
    offset += t.numel() * sizeof(double);
  }
  out << "end\n";
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());

  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw IoError("not a checkpoint: " + path.string());
  if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0) throw IoError("missing tensor count: " + path.string());
  const std::size_t count = std::stoull(line.substr(8));

  struct Record {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Record> records;
  records.reserve(count);
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw IoError("truncated manifest: " + path.string());
    std::istringstream ls(line);
    Record r;
    std::string dtype, shape;
    if (!(ls >> r.name >> dtype >> shape >> r.offset)) throw IoError("bad manifest line: " + line);
    if (dtype != "f64") throw IoError("unsupported dtype " + dtype + " for " + r.name);
    r.shape = parse_shape(shape);
    if (r.offset != expected_offset) throw IoError("non-contiguous offset for " + r.name);
    expected_offset += shape_numel(r.shape) * sizeof(double);
    records.push_back(std::move(r));
  }
  if (!std::getline(in, line) || line != "end") throw IoError("missing manifest terminator: " + path.string());

  NamedTensors out;
  out.reserve(records.size());
  for (const Record& r : records) {
    std::vector<double> data(shape_numel(r.shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw IoError("truncated payload for " + r.name);
    out.emplace_back(r.name, Tensor(r.shape, std::move(data)));
  }
  return out;
}

NamedTensors snapshot(const ParamRegistry& registry) {
  return snapshot_if(registry, [](const std::string&) { return true; });
}

void restore(ParamRegistry& registry, const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    ParamEntry& e = registry.entry(name);
    if (e.value.shape() != t.shape()) {
      throw ConfigError("checkpoint shape " + shape_to_string(t.shape()) + " does not match " + name + " " +
                        shape_to_string(e.value.shape()));
    }
    e.value = t;
  }
}

}  // namespace moelab
