#include "watchped/csv.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace watchped {

std::string format_double(double v) {
  if (v == 0.0) return "0";  // folds -0 so files stay canonical
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string format_fixed(double v, int decimals) {
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, decimals);
  std::string s(buf.data(), res.ptr);
  if (s.size() > 1 && s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

void CsvTable::fail(std::size_t row, const std::string& msg) const {
  throw ParseError(path.string() + ":" + std::to_string(line_numbers.at(row)) + ": " + msg);
}

double CsvTable::number(std::size_t row, std::size_t col) const {
  const std::string& s = rows[row][col];
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    fail(row, "column '" + header[col] + "' is not a finite number: '" + s + "'");
  }
  return v;
}

long long CsvTable::integer(std::size_t row, std::size_t col) const {
  const std::string& s = rows[row][col];
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    fail(row, "column '" + header[col] + "' is not an integer: '" + s + "'");
  }
  return v;
}

CsvTable read_csv(const std::filesystem::path& path, const std::vector<std::string>& expected_header) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": missing file");
  CsvTable t;
  t.path = path;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (!have_header) {
      if (fields != expected_header) {
        std::string want;
        for (const auto& h : expected_header) want += (want.empty() ? "" : ",") + h;
        throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected header '" + want + "'");
      }
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != expected_header.size()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(expected_header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
    t.line_numbers.push_back(lineno);
  }
  if (!have_header) throw ParseError(path.string() + ":1: missing header row");
  return t;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": missing file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace watchped
