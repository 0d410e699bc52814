// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Asymmetric min-max quantization.
 *
 *   delta = (max - min) / 2^b
 *   zero  = round(min / delta)
 *   level = clamp(round(v / delta) - zero, 0, 2^b - 1)
 *   v'    = (level + zero) * delta
 *
 * The divisor is 2^b, so max(V) lands one level above the top and is clamped
 * into level 2^b - 1. Rounding is round-half-to-even throughout.
 */

#include <cstdint>
#include <span>
#include <vector>

#include "stq/tensor.hpp"

namespace stq {

/// Bin size used for constant channels, where max == min.
inline constexpr double kDeltaFloor = 1e-8;

class BitWidth {
 public:
  explicit BitWidth(int bits);

  int bits() const noexcept { return bits_; }
  std::int64_t levels() const noexcept { return std::int64_t{1} << bits_; }
  std::int32_t max_level() const noexcept { return static_cast<std::int32_t>(levels() - 1); }

  friend bool operator==(BitWidth, BitWidth) = default;

 private:
  int bits_;
};

/// PerChannel keeps one (delta, zero) pair per row of the stored tensor: the
/// output channel of a weight, or the token of a dynamically quantized
/// activation. PerTensor keeps a single pair.
enum class Granularity : std::uint8_t { PerChannel = 0, PerTensor = 1 };

struct QuantParams {
  std::vector<double> delta;
  std::vector<std::int32_t> zero;
  BitWidth bits{8};
  Granularity granularity = Granularity::PerTensor;

  std::size_t size() const noexcept { return delta.size(); }
  // Row r's parameters; PerTensor maps every row to entry 0.
  std::size_t index_for_row(std::size_t r) const noexcept {
    return granularity == Granularity::PerTensor ? 0 : r;
  }

  /// Throws InvalidInput unless every delta is positive and finite and the
  /// zero vector matches delta in length.
  void validate() const;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

class QuantizedTensor {
 public:
  QuantizedTensor(std::size_t rows, std::size_t cols, std::vector<std::uint16_t> levels,
                  QuantParams params);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  const QuantParams& params() const noexcept { return params_; }
  std::span<const std::uint16_t> levels() const noexcept { return levels_; }
  std::uint16_t level(std::size_t r, std::size_t c) const noexcept { return levels_[r * cols_ + c]; }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint16_t> levels_;
  QuantParams params_;
};

/// Round half to even.
double round_even(double v) noexcept;

/// Parameters for one channel from its extrema. Not a data reduction, so it
/// is not counted by the statistic audit.
void params_from_extrema(double min, double max, BitWidth bits, double& delta, std::int32_t& zero);
QuantParams tensor_params_from_extrema(double min, double max, BitWidth bits);

/// Min-max parameters of a tensor. PerChannel reduces over each row.
QuantParams compute_params(const Tensor2D& values, BitWidth bits, Granularity granularity);

QuantizedTensor quantize(const Tensor2D& values, const QuantParams& params);
Tensor2D dequantize(const QuantizedTensor& q);

/// True when round(v / delta) - zero already lies in [0, 2^b - 1], i.e. the
/// clamp in quantize() is inactive for v.
bool in_quant_range(double v, double delta, std::int32_t zero, BitWidth bits) noexcept;

/// Float-domain product of two quantized operands, y = x' * w'^T.
///
/// Products are accumulated on the unscaled grid (level + zero) in double and
/// scaled once per output element by delta_x * delta_w. While the partial sums
/// stay below 2^53 this is exact and agrees bit-for-bit with integer_linear.
Tensor2D fake_quant_matmul(const QuantizedTensor& x, const QuantizedTensor& w);

/// dequantize(quantize(x, xq)) * dequantize(quantize(w, wq))^T.
Tensor2D fake_quant_linear(const Tensor2D& x, const Tensor2D& w, const QuantParams& wq,
                           const QuantParams& xq);

/// Integer execution: sum (x_lvl + z_x)(w_lvl + z_w) in int64, then scaled by
/// delta_x * delta_w after accumulation. Throws OverflowRisk if the worst-case
/// accumulator magnitude does not fit in int64.
Tensor2D integer_linear(const QuantizedTensor& xq, const QuantizedTensor& wq);

/// Per-token dynamic quantization: min-max parameters are computed for every row
/// at call time. The returned tensor carries PerChannel (per-row) parameters.
/// Baseline only; these parameters are never written into static tables.
QuantizedTensor dynamic_token_quant(const Tensor2D& x, BitWidth bits);

}  // namespace stq
