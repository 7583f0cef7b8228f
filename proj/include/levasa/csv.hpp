#pragma once

// Small CSV helpers shared by the file formats. Cells never contain commas or
// quotes in any format this library writes, so no quoting is supported.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "levasa/error.hpp"

namespace levasa::csv {

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t')) c.pop_back();
    const auto first = c.find_first_not_of(" \t");
    c = first == std::string::npos ? std::string() : c.substr(first);
  }
  return cells;
}

struct Table {
  std::string source;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }

  std::size_t column(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw Error(source + ": missing column '" + std::string(name) + "'");
  }

  std::string where(std::size_t row) const { return source + ":" + std::to_string(line_numbers.at(row)); }
};

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Table t;
  t.source = path.string();
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (line.empty()) continue;
    if (!have_header) {
      t.header = split(line);
      have_header = true;
      continue;
    }
    auto cells = split(line);
    if (cells.size() != t.header.size()) {
      throw Error(t.source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                  " cells, found " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(lineno);
  }
  if (!have_header) throw Error(t.source + ": empty file, header expected");
  return t;
}

inline double parse_double(const std::string& cell, const std::string& where) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last) throw Error(where + ": not a number: '" + cell + "'");
  return v;
}

inline long long parse_int(const std::string& cell, const std::string& where) {
  long long v = 0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (cell.empty() || ec != std::errc() || ptr != last) throw Error(where + ": not an integer: '" + cell + "'");
  return v;
}

// 17 significant digits: parses back to the identical double.
inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace levasa::csv
