// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/tensor.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "stq/error.hpp"

namespace stq {

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols) : Tensor2D(rows, cols, std::vector<double>(rows * cols, 0.0)) {}

Tensor2D::Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows_ == 0 || cols_ == 0) {
    throw Error(ErrorCode::ShapeError, "tensor dimensions must be positive");
  }
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::ShapeError, "tensor data length " + std::to_string(data_.size()) +
                                           " does not match " + std::to_string(rows_) + "x" +
                                           std::to_string(cols_));
  }
}

Tensor2D Tensor2D::identity(std::size_t n) {
  Tensor2D t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

bool Tensor2D::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor2D matmul_transposed(const Tensor2D& x, const Tensor2D& w) {
  if (x.cols() != w.cols()) {
    throw Error(ErrorCode::ShapeError, "inner dimensions differ: " + std::to_string(x.cols()) + " vs " +
                                           std::to_string(w.cols()));
  }
  const std::size_t n = x.cols();
  Tensor2D y(x.rows(), w.rows());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double* xr = x.row(t).data();
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double* wr = w.row(o).data();
      // Four interleaved partial sums, always combined in the same order.
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      std::size_t i = 0;
      for (; i + 4 <= n; i += 4) {
        a0 += xr[i] * wr[i];
        a1 += xr[i + 1] * wr[i + 1];
        a2 += xr[i + 2] * wr[i + 2];
        a3 += xr[i + 3] * wr[i + 3];
      }
      for (; i < n; ++i) a0 += xr[i] * wr[i];
      y(t, o) = (a0 + a1) + (a2 + a3);
    }
  }
  return y;
}

double relative_frobenius_error(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeError, "relative error of differently shaped tensors");
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    num += d * d;
    den += b.values()[i] * b.values()[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : INFINITY;
  return std::sqrt(num / den);
}

std::uint64_t digest(const Tensor2D& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t word) {
    for (int i = 0; i < 8; ++i) {
      h ^= (word >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  mix(t.rows());
  mix(t.cols());
  for (double v : t.values()) mix(std::bit_cast<std::uint64_t>(v));
  return h;
}

}  // namespace stq
