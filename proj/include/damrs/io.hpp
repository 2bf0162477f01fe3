/*
 * Copyright 2026 The damrs Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "damrs/common.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace damrs::io {

namespace fs = std::filesystem;

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) {
    out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
  }
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

using detail::trim;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

/// Binary matrix: u32 rows, u32 cols, then rows*cols float32, all little-endian,
/// row-major.
inline std::string encode_matrix(const Matrix& m) {
  std::string out;
  out.reserve(8 + 4 * static_cast<std::size_t>(m.size()));
  detail::put_u32_le(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32_le(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      detail::put_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
    }
  }
  return out;
}

inline Matrix decode_matrix(std::string_view bytes, const std::string& origin) {
  if (bytes.size() < 8) {
    throw ParseError(origin, 0, "binary matrix shorter than its 8-byte header");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t rows = detail::get_u32_le(p);
  const std::uint32_t cols = detail::get_u32_le(p + 4);
  const std::size_t expected = 8 + 4ull * rows * cols;
  if (bytes.size() != expected) {
    throw ParseError(origin, 0,
                     "binary matrix size " + std::to_string(bytes.size()) + " does not match header " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix m(rows, cols);
  const unsigned char* q = p + 8;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c, q += 4) {
      m(r, c) = static_cast<double>(std::bit_cast<float>(detail::get_u32_le(q)));
    }
  }
  return m;
}

inline void write_matrix_bin(const fs::path& path, const Matrix& m) { write_file(path, encode_matrix(m)); }

inline Matrix read_matrix_bin(const fs::path& path) { return decode_matrix(read_file(path), path.string()); }

/// CSV fallback: one row per line, comma-separated reals. Blank lines skipped.
inline Matrix read_matrix_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(t);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const std::string c = trim(cell);
      double v = 0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size()) {
        throw ParseError(path.string(), lineno, "not a number: '" + c + "'");
      }
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw ParseError(path.string(), lineno, "ragged row");
    }
    rows.push_back(std::move(row));
  }
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

inline void write_matrix_csv(const fs::path& path, const Matrix& m) {
  std::ostringstream out;
  out.precision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << m(r, c);
    }
    out << '\n';
  }
  write_file(path, out.str());
}

/// Dispatches on extension: `.csv` is text, everything else is binary.
inline Matrix read_matrix(const fs::path& path) {
  return path.extension() == ".csv" ? read_matrix_csv(path) : read_matrix_bin(path);
}

/// Reads `user<TAB>item` lines. Blank lines are skipped; anything else that is
/// not exactly two non-empty tab-separated fields is a parse error.
inline std::vector<std::pair<std::string, std::string>> read_pairs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(path.string(), lineno, "expected exactly two tab-separated fields");
    }
    std::string user = line.substr(0, tab);
    std::string item = line.substr(tab + 1);
    if (user.empty() || item.empty()) {
      throw ParseError(path.string(), lineno, "empty user or item field");
    }
    pairs.emplace_back(std::move(user), std::move(item));
  }
  return pairs;
}

/// Plain `key = value` lines; `#` starts a comment. Duplicate keys are errors.
inline std::map<std::string, std::string> parse_key_values(std::string_view text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin, lineno, "expected 'key = value'");
    }
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) {
      throw ParseError(origin, lineno, "empty key");
    }
    if (!kv.emplace(key, value).second) {
      throw ParseError(origin, lineno, "duplicate key '" + key + "'");
    }
  }
  return kv;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find(sep, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    std::string piece = trim(s.substr(start, end - start));
    if (!piece.empty()) out.push_back(std::move(piece));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace damrs::io
