// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/quant_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "stq/audit.hpp"
#include "stq/error.hpp"

namespace stq {
namespace {

constexpr double kInt32Max = static_cast<double>(std::numeric_limits<std::int32_t>::max());
constexpr double kInt32Min = static_cast<double>(std::numeric_limits<std::int32_t>::min());

void require_finite(const Tensor2D& values) {
  if (!values.all_finite()) throw Error(ErrorCode::InvalidInput, "tensor contains non-finite values");
}

// Reductions shared by the instrumented entry points.
QuantParams per_row_params(const Tensor2D& values, BitWidth bits) {
  QuantParams p;
  p.bits = bits;
  p.granularity = Granularity::PerChannel;
  p.delta.resize(values.rows());
  p.zero.resize(values.rows());
  for (std::size_t r = 0; r < values.rows(); ++r) {
    const auto row = values.row(r);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    params_from_extrema(*lo, *hi, bits, p.delta[r], p.zero[r]);
  }
  return p;
}

QuantParams whole_tensor_params(const Tensor2D& values, BitWidth bits) {
  const auto all = values.values();
  const auto [lo, hi] = std::minmax_element(all.begin(), all.end());
  return tensor_params_from_extrema(*lo, *hi, bits);
}

std::uint16_t quantize_value(double v, double delta, std::int32_t zero, std::int32_t max_level) noexcept {
  const double level = round_even(v / delta) - static_cast<double>(zero);
  return static_cast<std::uint16_t>(std::clamp(level, 0.0, static_cast<double>(max_level)));
}

void check_operands(const QuantizedTensor& x, const QuantizedTensor& w) {
  if (x.cols() != w.cols()) {
    throw Error(ErrorCode::ShapeError, "inner dimensions differ: " + std::to_string(x.cols()) + " vs " +
                                           std::to_string(w.cols()));
  }
}

// Largest |level + zero| any entry of q can take.
double max_offset(const QuantizedTensor& q) {
  double m = 0.0;
  const double top = static_cast<double>(q.params().bits.max_level());
  for (std::int32_t z : q.params().zero) {
    m = std::max({m, std::abs(static_cast<double>(z)), std::abs(static_cast<double>(z) + top)});
  }
  return m;
}

}  // namespace

BitWidth::BitWidth(int bits) : bits_(bits) {
  if (bits < 2 || bits > 16) {
    throw Error(ErrorCode::InvalidInput, "bit width " + std::to_string(bits) + " outside [2, 16]");
  }
}

void QuantParams::validate() const {
  if (delta.empty() || delta.size() != zero.size()) {
    throw Error(ErrorCode::InvalidInput, "delta and zero vectors must be non-empty and equal in length");
  }
  if (granularity == Granularity::PerTensor && delta.size() != 1) {
    throw Error(ErrorCode::InvalidInput, "per-tensor parameters must have exactly one entry");
  }
  for (double d : delta) {
    if (!(d > 0.0) || !std::isfinite(d)) throw Error(ErrorCode::InvalidInput, "bin sizes must be positive and finite");
  }
}

QuantizedTensor::QuantizedTensor(std::size_t rows, std::size_t cols, std::vector<std::uint16_t> levels,
                                 QuantParams params)
    : rows_(rows), cols_(cols), levels_(std::move(levels)), params_(std::move(params)) {
  if (levels_.size() != rows_ * cols_) throw Error(ErrorCode::ShapeError, "level count does not match shape");
  params_.validate();
  if (params_.granularity == Granularity::PerChannel && params_.size() != rows_) {
    throw Error(ErrorCode::ShapeError, "per-channel parameter count " + std::to_string(params_.size()) +
                                           " does not match row count " + std::to_string(rows_));
  }
  const auto top = static_cast<std::uint16_t>(params_.bits.max_level());
  for (std::uint16_t l : levels_) {
    if (l > top) throw Error(ErrorCode::InvalidInput, "level exceeds 2^b - 1");
  }
}

double round_even(double v) noexcept {
  // nearbyint honours the current rounding mode; the toolkit never changes it
  // from FE_TONEAREST, which rounds ties to even.
  return std::nearbyint(v);
}

void params_from_extrema(double min, double max, BitWidth bits, double& delta, std::int32_t& zero) {
  if (!std::isfinite(min) || !std::isfinite(max) || min > max) {
    throw Error(ErrorCode::InvalidInput, "invalid extrema");
  }
  delta = (max - min) / static_cast<double>(bits.levels());
  if (!std::isfinite(delta)) throw Error(ErrorCode::InvalidInput, "range too wide to quantize");
  if (delta == 0.0) {
    // Constant channel. The floor is widened only when min / floor would not
    // fit a 32-bit zero point.
    delta = std::max(kDeltaFloor, std::abs(min) * 0x1p-30);
  }
  const double z = round_even(min / delta);
  if (z > kInt32Max || z < kInt32Min) {
    throw Error(ErrorCode::InvalidInput, "zero point " + std::to_string(z) + " not representable in int32");
  }
  zero = static_cast<std::int32_t>(z);
}

QuantParams tensor_params_from_extrema(double min, double max, BitWidth bits) {
  QuantParams p;
  p.bits = bits;
  p.granularity = Granularity::PerTensor;
  p.delta.resize(1);
  p.zero.resize(1);
  params_from_extrema(min, max, bits, p.delta[0], p.zero[0]);
  return p;
}

QuantParams compute_params(const Tensor2D& values, BitWidth bits, Granularity granularity) {
  require_finite(values);
  audit::record_statistic();
  return granularity == Granularity::PerChannel ? per_row_params(values, bits) : whole_tensor_params(values, bits);
}

QuantizedTensor quantize(const Tensor2D& values, const QuantParams& params) {
  params.validate();
  if (params.granularity == Granularity::PerChannel && params.size() != values.rows()) {
    throw Error(ErrorCode::ShapeError, "per-channel parameter count " + std::to_string(params.size()) +
                                           " does not match row count " + std::to_string(values.rows()));
  }
  const std::int32_t top = params.bits.max_level();
  std::vector<std::uint16_t> levels(values.size());
  for (std::size_t r = 0; r < values.rows(); ++r) {
    const std::size_t k = params.index_for_row(r);
    const double delta = params.delta[k];
    const std::int32_t zero = params.zero[k];
    const auto row = values.row(r);
    std::uint16_t* out = levels.data() + r * values.cols();
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = quantize_value(row[c], delta, zero, top);
  }
  return QuantizedTensor(values.rows(), values.cols(), std::move(levels), params);
}

Tensor2D dequantize(const QuantizedTensor& q) {
  Tensor2D out(q.rows(), q.cols());
  const QuantParams& p = q.params();
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const std::size_t k = p.index_for_row(r);
    const double delta = p.delta[k];
    const std::int64_t zero = p.zero[k];
    for (std::size_t c = 0; c < q.cols(); ++c) {
      out(r, c) = static_cast<double>(static_cast<std::int64_t>(q.level(r, c)) + zero) * delta;
    }
  }
  return out;
}

bool in_quant_range(double v, double delta, std::int32_t zero, BitWidth bits) noexcept {
  const double level = round_even(v / delta) - static_cast<double>(zero);
  return level >= 0.0 && level <= static_cast<double>(bits.max_level());
}

Tensor2D fake_quant_matmul(const QuantizedTensor& x, const QuantizedTensor& w) {
  check_operands(x, w);
  const std::size_t n = x.cols();

  // Unscaled dequantized operands, level + zero.
  auto offsets = [n](const QuantizedTensor& q) {
    std::vector<double> out(q.rows() * n);
    for (std::size_t r = 0; r < q.rows(); ++r) {
      const double zero = q.params().zero[q.params().index_for_row(r)];
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<double>(q.level(r, c)) + zero;
    }
    return out;
  };
  const std::vector<double> xo = offsets(x);
  const std::vector<double> wo = offsets(w);

  Tensor2D y(x.rows(), w.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double* xr = xo.data() + t * n;
    const double dx = x.params().delta[x.params().index_for_row(t)];
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double* wr = wo.data() + o * n;
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      std::size_t i = 0;
      for (; i + 4 <= n; i += 4) {
        a0 += xr[i] * wr[i];
        a1 += xr[i + 1] * wr[i + 1];
        a2 += xr[i + 2] * wr[i + 2];
        a3 += xr[i + 3] * wr[i + 3];
      }
      for (; i < n; ++i) a0 += xr[i] * wr[i];
      const double scale = dx * w.params().delta[w.params().index_for_row(o)];
      y(t, o) = ((a0 + a1) + (a2 + a3)) * scale;
    }
  }
  return y;
}

Tensor2D fake_quant_linear(const Tensor2D& x, const Tensor2D& w, const QuantParams& wq, const QuantParams& xq) {
  if (x.cols() != w.cols()) {
    throw Error(ErrorCode::ShapeError, "inner dimensions differ: " + std::to_string(x.cols()) + " vs " +
                                           std::to_string(w.cols()));
  }
  return fake_quant_matmul(quantize(x, xq), quantize(w, wq));
}

Tensor2D integer_linear(const QuantizedTensor& xq, const QuantizedTensor& wq) {
  check_operands(xq, wq);
  const std::size_t n = xq.cols();
  const long double bound = static_cast<long double>(n) * max_offset(xq) * max_offset(wq);
  if (bound > static_cast<long double>(std::numeric_limits<std::int64_t>::max())) {
    throw Error(ErrorCode::OverflowRisk, "accumulator bound exceeds int64");
  }

  auto offsets = [n](const QuantizedTensor& q) {
    std::vector<std::int64_t> out(q.rows() * n);
    for (std::size_t r = 0; r < q.rows(); ++r) {
      const std::int64_t zero = q.params().zero[q.params().index_for_row(r)];
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<std::int64_t>(q.level(r, c)) + zero;
    }
    return out;
  };
  const std::vector<std::int64_t> xo = offsets(xq);
  const std::vector<std::int64_t> wo = offsets(wq);

  Tensor2D y(xq.rows(), wq.rows());
  for (std::size_t t = 0; t < xq.rows(); ++t) {
    const std::int64_t* xr = xo.data() + t * n;
    const double dx = xq.params().delta[xq.params().index_for_row(t)];
    for (std::size_t o = 0; o < wq.rows(); ++o) {
      const std::int64_t* wr = wo.data() + o * n;
      std::int64_t acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += xr[i] * wr[i];
      const double scale = dx * wq.params().delta[wq.params().index_for_row(o)];
      y(t, o) = static_cast<double>(acc) * scale;
    }
  }
  return y;
}

QuantizedTensor dynamic_token_quant(const Tensor2D& x, BitWidth bits) {
  require_finite(x);
  // One event per call: the whole per-token reduction happens at inference.
  audit::record_statistic();
  return quantize(x, per_row_params(x, bits));
}

}  // namespace stq
