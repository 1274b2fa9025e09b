#include "moelab/table.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

void Table::add(std::vector<std::string> row) {
  if (row.size() != header.size()) throw ConfigError("table row has " + std::to_string(row.size()) + " cells, header has " +
                                                     std::to_string(header.size()));
  rows.push_back(std::move(row));
}

std::string Table::to_csv() const {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

std::string Table::to_markdown() const {
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    out << '|';
    for (const auto& c : cells) out << ' ' << c << " |";
    out << '\n';
  };
  line(header);
  out << '|';
  for (std::size_t i = 0; i < header.size(); ++i) out << " --- |";
  out << '\n';
  for (const auto& r : rows) line(r);
  return out.str();
}

void Table::save(const std::filesystem::path& stem) const {
  write_text(std::filesystem::path(stem.string() + ".csv"), to_csv());
  write_text(std::filesystem::path(stem.string() + ".md"), to_markdown());
}

std::string fmt(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace moelab
