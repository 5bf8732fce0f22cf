#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace watchped {

/// Malformed on-disk input; the message carries file and line.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal form that reads back to the identical double.
std::string format_double(double v);
/// Fixed-point with the given number of decimals.
std::string format_fixed(double v, int decimals);

std::vector<std::string> split_csv_line(std::string_view line);

struct CsvTable {
  std::filesystem::path path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line_numbers;  // 1-based source line of each row

  [[noreturn]] void fail(std::size_t row, const std::string& msg) const;
  double number(std::size_t row, std::size_t col) const;
  long long integer(std::size_t row, std::size_t col) const;
};

/// Reads a comma-separated file whose first line must equal `expected_header`.
CsvTable read_csv(const std::filesystem::path& path, const std::vector<std::string>& expected_header);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace watchped
