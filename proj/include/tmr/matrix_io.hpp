// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary matrix container shared by datasets, indexes and checkpoints:
//   "TMRM" | version u8 | rows u32 | cols u32 | rows*cols f32, row-major LE.
// Several matrices may follow each other in one file.

#pragma once

#include "tmr/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace tmr::io {

inline constexpr std::uint8_t kMatrixVersion = 1;

void write_matrix(std::ostream& out, const Matrix& m);
/// Reads one matrix; `what` names the source in error messages.
Matrix read_matrix(std::istream& in, const std::string& what);

void save_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& path);

void save_matrices(const std::filesystem::path& path, const std::vector<Matrix>& ms);
std::vector<Matrix> load_matrices(const std::filesystem::path& path);

/// Raw little-endian f32 blob (checkpoint weights).
void write_f32(std::ostream& out, const Matrix& m);
void read_f32(std::istream& in, Matrix& m, const std::string& what);

/// Rounds every entry to the nearest f32 value.
Matrix round_to_f32(const Matrix& m);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace tmr::io
