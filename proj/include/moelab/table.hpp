#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moelab {

/// Small string table rendered as CSV and as a markdown twin.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row);
  std::string to_csv() const;
  std::string to_markdown() const;
  /// Writes `<stem>.csv` and `<stem>.md`.
  void save(const std::filesystem::path& stem) const;
};

/// Fixed-precision number formatting shared by every report.
std::string fmt(double v, int precision = 4);

/// Writes a text file, creating parent directories. IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace moelab
