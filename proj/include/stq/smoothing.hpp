// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stq/tensor.hpp"

namespace stq {

/// Per-input-channel abs-max statistics feeding the smoothing scales.
struct ChannelAbsMax {
  std::vector<double> x_absmax;  // running max|X_i|
  std::vector<double> w_absmax;  // max|W_i|
  std::size_t observations = 0;  // running-average updates applied to x_absmax
};

/// Per input channel i, max over output rows of |w(o, i)|.
std::vector<double> weight_absmax(const Tensor2D& w);

/// Per-sample channel abs-max averaged over the batch. The batch's rows are
/// split into `samples` equal contiguous groups, one group per sample.
std::vector<double> batch_channel_absmax(const Tensor2D& batch_x, std::size_t samples = 1);

/// new = momentum * old + (1 - momentum) * batch statistic; the first
/// observation initialises the state to the batch statistic.
ChannelAbsMax update_running_absmax(ChannelAbsMax state, const Tensor2D& batch_x, double momentum,
                                    std::size_t samples = 1);

/// Same update from an already reduced batch statistic.
void apply_running_absmax(ChannelAbsMax& state, std::span<const double> batch_stat, double momentum);

/// s_i = max|X_i|^alpha / max|W_i|^(1 - alpha). Channels with a zero
/// statistic on either side get s_i = 1.
std::vector<double> compute_scales(const ChannelAbsMax& stats, double alpha);

struct SmoothedPair {
  Tensor2D x;  // X * diag(s)^-1
  Tensor2D w;  // diag(s) * W, i.e. input column i of the stored weight times s_i
};

SmoothedPair apply_smoothing(const Tensor2D& x, const Tensor2D& w, std::span<const double> s);

/// Smoothing scales for every time range: a C_I x R matrix, column r holding
/// the scales used by steps in range r. ASQ tables have R = 1.
class SmoothScale {
 public:
  SmoothScale(double alpha, std::vector<std::vector<double>> columns);
  static SmoothScale identity(std::size_t channels, std::size_t ranges);

  double alpha() const noexcept { return alpha_; }
  std::size_t channels() const noexcept { return columns_.front().size(); }
  std::size_t ranges() const noexcept { return columns_.size(); }
  std::span<const double> column(std::size_t r) const { return columns_.at(r); }

  friend bool operator==(const SmoothScale&, const SmoothScale&) = default;

 private:
  double alpha_;
  std::vector<std::vector<double>> columns_;
};

/// One folded weight diag(s_r) * W per time range.
std::vector<Tensor2D> fold_weights(const Tensor2D& w, const SmoothScale& scales);

}  // namespace stq
