#ifndef DUCTILE_IO_HPP
#define DUCTILE_IO_HPP

// CSV artifact output with full round-trip decimal precision, a small CSV
// reader for chain/curve files, and FNV-1a checksums for the run manifest.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace ductile::io {

/// Shortest decimal string that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc())
    throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, res.ptr);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int cols() const { return static_cast<int>(header.size()); }

  void check() const {
    for (const auto& r : rows) {
      if (r.size() != header.size())
        throw std::runtime_error("csv table: ragged row");
    }
  }
};

inline void write_csv(const std::string& path, const Table& t) {
  t.check();
  std::ofstream out(path, std::ios::binary);  // binary: no CRLF surprises
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (size_t j = 0; j < t.header.size(); ++j) {
    if (j) out << ',';
    out << t.header[j];
  }
  out << '\n';
  for (const auto& r : t.rows) {
    for (size_t j = 0; j < r.size(); ++j) {
      if (j) out << ',';
      out << format_double(r[j]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

inline Table read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) t.header.push_back(cell);
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      double v = 0.0;
      const char* b = cell.data();
      const auto res = std::from_chars(b, b + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != b + cell.size())
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": bad number '" + cell + "'");
      row.push_back(v);
    }
    if (row.size() != t.header.size())
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": ragged row");
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ----------------------------------------------------------------------------
// Checksums
// ----------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for checksum");
  char buf[1 << 14];
  std::uint64_t h = 0xcbf29ce484222325ull;
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace ductile::io

#endif  // DUCTILE_IO_HPP
