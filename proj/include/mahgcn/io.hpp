#pragma once

#include "mahgcn/common.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mahgcn::io {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

/// Reads a whitespace-delimited numeric matrix. Lines starting with '#' are
/// skipped. All rows must have the same number of columns.
inline Matrix read_matrix(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "missing-file", "cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (row.empty()) continue;
    if (!rows.empty() && row.size() != rows.front().size())
      fail("parse", "ragged rows in " + path);
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), "parse", "empty matrix file " + path);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  return m;
}

/// Fixed 17-significant-digit formatting: round-trips doubles exactly and
/// keeps reruns byte-identical.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_matrix(const std::string& path, const Matrix& m,
                         const std::string& header = "") {
  std::ofstream out(path);
  require(out.good(), "io", "cannot write " + path);
  if (!header.empty()) out << "# " << header << "\n";
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (j) out << ' ';
      out << format_double(m(i, j));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoint: named tensors in a flat binary container, bit-exact round trip.
// Layout: magic "MHCK1\n", u64 count, then per tensor:
//   u64 name_len, name bytes, u64 rows, u64 cols, rows*cols little-endian f64.
// ---------------------------------------------------------------------------

using NamedTensors = std::map<std::string, Matrix>;

inline void write_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path);
  out.write("MHCK1\n", 6);
  auto put_u64 = [&](std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
  };
  put_u64(tensors.size());
  for (const auto& [name, m] : tensors) {
    put_u64(name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u64(static_cast<std::uint64_t>(m.rows()));
    put_u64(static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double)) * m.size());
  }
}

inline NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "missing-file", "cannot open " + path);
  char magic[6];
  in.read(magic, 6);
  require(in.good() && std::memcmp(magic, "MHCK1\n", 6) == 0, "parse",
          "bad checkpoint magic in " + path);
  auto get_u64 = [&]() {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  };
  NamedTensors tensors;
  std::uint64_t count = get_u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint64_t name_len = get_u64();
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    Index rows = static_cast<Index>(get_u64());
    Index cols = static_cast<Index>(get_u64());
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double)) * m.size());
    require(in.good(), "parse", "truncated checkpoint " + path);
    tensors.emplace(std::move(name), std::move(m));
  }
  return tensors;
}

}  // namespace mahgcn::io
