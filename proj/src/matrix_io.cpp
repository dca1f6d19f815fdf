// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/matrix_io.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tmr::io {

namespace {

static_assert(std::endian::native == std::endian::little,
              "matrix files are little-endian; big-endian hosts need byte swapping");

constexpr std::array<char, 4> kMagic = {'T', 'M', 'R', 'M'};

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(what + ": truncated header");
  return v;
}

}  // namespace

void write_f32(std::ostream& out, const Matrix& m) {
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) buf[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32(std::istream& in, Matrix& m, const std::string& what) {
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  if (!in.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
    throw FormatError(what + ": truncated data");
  }
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    float v = buf[static_cast<std::size_t>(i)];
    if (!std::isfinite(v)) throw FormatError(what + ": non-finite value at element " + std::to_string(i));
    m.data()[i] = v;
  }
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(kMatrixVersion));
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  write_f32(out, m);
}

Matrix read_matrix(std::istream& in, const std::string& what) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError(what + ": bad magic");
  int version = in.get();
  if (version != kMatrixVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  }
  std::uint32_t rows = get_u32(in, what);
  std::uint32_t cols = get_u32(in, what);
  if (static_cast<std::uint64_t>(rows) * cols > (1ULL << 31)) throw FormatError(what + ": matrix too large");
  Matrix m(rows, cols);
  read_f32(in, m, what);
  return m;
}

void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  save_matrices(path, {m});
}

Matrix load_matrix(const std::filesystem::path& path) {
  auto ms = load_matrices(path);
  if (ms.size() != 1) throw FormatError(path.string() + ": expected exactly one matrix");
  return std::move(ms.front());
}

void save_matrices(const std::filesystem::path& path, const std::vector<Matrix>& ms) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& m : ms) {
    if (!m.allFinite()) throw FormatError(path.string() + ": refusing to write a non-finite matrix");
    write_matrix(out, m);
  }
  if (!out) throw Error("write failed for " + path.string());
}

std::vector<Matrix> load_matrices(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::vector<Matrix> out;
  while (in.peek() != std::char_traits<char>::eof()) out.push_back(read_matrix(in, path.string()));
  if (out.empty()) throw FormatError(path.string() + ": empty file");
  return out;
}

Matrix round_to_f32(const Matrix& m) {
  return m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace tmr::io
