// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Binary TimeStepTable file, all integers little-endian, reals as IEEE-754
 * binary64 bit patterns:
 *
 *   "STQTABLE"                      8-byte magic
 *   u32 version                     kTableFormatVersion
 *   u32 packing                     0: one u16 word per weight level
 *   config    u8 w_bits, u8 a_bits, u8 smoothing, u32 ranges, f64 alpha, f64 momentum
 *   model     u64 config hash, str description
 *   partition u32 total_steps, u32 count, count x (u32 begin, u32 end)
 *   u32 layer count, then per layer:
 *     str id, u32 in_channels, u32 out_channels, f64 smoothing alpha
 *     per range: params activation, params weight, in x f64 scales,
 *                out*in x u16 levels (row-major, output channel major)
 *   u32 CRC-32 of every preceding byte
 *
 * str is u32 length + bytes; params is u8 granularity, u8 bits, u32 n,
 * n x (f64 delta, i32 zero). Step 0 is the first denoising iteration, the
 * noisiest one.
 */

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "stq/calibration.hpp"

namespace stq {

inline constexpr std::uint32_t kTableFormatVersion = 1;

std::vector<std::uint8_t> encode_table(const TimeStepTable& table);

/// Throws ChecksumMismatch, FormatError or UnsupportedVersion.
TimeStepTable decode_table(std::span<const std::uint8_t> bytes);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

/// Writes through a temporary sibling file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_table(const TimeStepTable& table, const std::filesystem::path& path);
TimeStepTable load_table(const std::filesystem::path& path);

}  // namespace stq
