// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace stq {

/// Dense row-major matrix of doubles.
///
/// Activations are stored tokens x input-channels (T x C_I). Weights are
/// stored output-channels x input-channels (C_O x C_I), so row o of a weight
/// is output channel o and a linear layer computes y = x * w^T.
class Tensor2D {
 public:
  Tensor2D(std::size_t rows, std::size_t cols);
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor2D identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> data_;
};

/// y = x * w^T for x (T x C_I) and w (C_O x C_I).
Tensor2D matmul_transposed(const Tensor2D& x, const Tensor2D& w);

/// Frobenius norm of a - b divided by the Frobenius norm of b.
double relative_frobenius_error(const Tensor2D& a, const Tensor2D& b);

/// FNV-1a 64 over the shape and the little-endian bit patterns of the values.
std::uint64_t digest(const Tensor2D& t);

}  // namespace stq
