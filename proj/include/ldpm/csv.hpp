#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

namespace ldpm::csv {

/// Shortest decimal text that round-trips the double exactly.
std::string format(double value);

double parse_double(std::string_view text, const std::string& where);
long long parse_int(std::string_view text, const std::string& where);

std::vector<std::string> split_line(std::string_view line);

/// Header-first CSV file; rows are returned with their one-based line numbers.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;

  /// Index of a named column; throws Io when missing.
  std::size_t column(std::string_view name, const std::string& file) const;
};

Table read(const std::filesystem::path& path);

/// Writer that emits '\n' line endings and locale-independent numbers.
class Writer {
 public:
  explicit Writer(const std::filesystem::path& path);

  Writer& field(std::string_view text);
  Writer& field(double value);
  Writer& field(long long value);
  Writer& field(int value) { return field(static_cast<long long>(value)); }
  void end_row();

 private:
  std::ofstream out_;
  bool first_ = true;
};

}  // namespace ldpm::csv
