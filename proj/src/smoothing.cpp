// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stq/audit.hpp"
#include "stq/error.hpp"

namespace stq {
namespace {

void check_scales(std::span<const double> s, std::size_t channels) {
  if (s.size() != channels) {
    throw Error(ErrorCode::ShapeError, "scale length " + std::to_string(s.size()) + " does not match " +
                                           std::to_string(channels) + " input channels");
  }
  for (double v : s) {
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorCode::NonPositiveScale, "smoothing scales must be positive");
  }
}

}  // namespace

std::vector<double> weight_absmax(const Tensor2D& w) {
  audit::record_statistic();
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t o = 0; o < w.rows(); ++o) {
    const auto row = w.row(o);
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::max(out[i], std::abs(row[i]));
  }
  return out;
}

std::vector<double> batch_channel_absmax(const Tensor2D& batch_x, std::size_t samples) {
  if (samples == 0 || batch_x.rows() % samples != 0) {
    throw Error(ErrorCode::ShapeError, "batch of " + std::to_string(batch_x.rows()) + " rows cannot be split into " +
                                           std::to_string(samples) + " samples");
  }
  audit::record_statistic();
  const std::size_t per_sample = batch_x.rows() / samples;
  std::vector<double> mean(batch_x.cols(), 0.0);
  std::vector<double> sample_max(batch_x.cols());
  for (std::size_t s = 0; s < samples; ++s) {
    std::fill(sample_max.begin(), sample_max.end(), 0.0);
    for (std::size_t r = s * per_sample; r < (s + 1) * per_sample; ++r) {
      const auto row = batch_x.row(r);
      for (std::size_t i = 0; i < row.size(); ++i) sample_max[i] = std::max(sample_max[i], std::abs(row[i]));
    }
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += sample_max[i];
  }
  for (double& m : mean) m /= static_cast<double>(samples);
  return mean;
}

void apply_running_absmax(ChannelAbsMax& state, std::span<const double> batch_stat, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw Error(ErrorCode::InvalidInput, "momentum must lie in [0, 1)");
  }
  if (state.observations == 0) {
    state.x_absmax.assign(batch_stat.begin(), batch_stat.end());
  } else {
    if (state.x_absmax.size() != batch_stat.size()) {
      throw Error(ErrorCode::ShapeError, "batch channel count does not match running statistic");
    }
    for (std::size_t i = 0; i < batch_stat.size(); ++i) {
      state.x_absmax[i] = momentum * state.x_absmax[i] + (1.0 - momentum) * batch_stat[i];
    }
  }
  ++state.observations;
}

ChannelAbsMax update_running_absmax(ChannelAbsMax state, const Tensor2D& batch_x, double momentum,
                                    std::size_t samples) {
  if (!state.w_absmax.empty() && state.w_absmax.size() != batch_x.cols()) {
    throw Error(ErrorCode::ShapeError, "batch channel count does not match weight statistic");
  }
  const std::vector<double> stat = batch_channel_absmax(batch_x, samples);
  apply_running_absmax(state, stat, momentum);
  return state;
}

std::vector<double> compute_scales(const ChannelAbsMax& stats, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidInput, "alpha must lie in [0, 1]");
  if (stats.x_absmax.size() != stats.w_absmax.size()) {
    throw Error(ErrorCode::ShapeError, "activation and weight statistics differ in length");
  }
  std::vector<double> s(stats.x_absmax.size(), 1.0);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double xa = stats.x_absmax[i];
    const double wa = stats.w_absmax[i];
    if (xa > 0.0 && wa > 0.0) s[i] = std::pow(xa, alpha) / std::pow(wa, 1.0 - alpha);
  }
  return s;
}

SmoothedPair apply_smoothing(const Tensor2D& x, const Tensor2D& w, std::span<const double> s) {
  if (x.cols() != w.cols()) throw Error(ErrorCode::ShapeError, "activation and weight channel counts differ");
  check_scales(s, x.cols());
  Tensor2D xs = x;
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    auto row = xs.row(t);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] /= s[i];
  }
  Tensor2D ws = w;
  for (std::size_t o = 0; o < ws.rows(); ++o) {
    auto row = ws.row(o);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= s[i];
  }
  return {std::move(xs), std::move(ws)};
}

SmoothScale::SmoothScale(double alpha, std::vector<std::vector<double>> columns)
    : alpha_(alpha), columns_(std::move(columns)) {
  if (columns_.empty() || columns_.front().empty()) throw Error(ErrorCode::ShapeError, "empty smoothing scale");
  for (const auto& col : columns_) check_scales(col, columns_.front().size());
}

SmoothScale SmoothScale::identity(std::size_t channels, std::size_t ranges) {
  return SmoothScale(0.0, std::vector<std::vector<double>>(ranges, std::vector<double>(channels, 1.0)));
}

std::vector<Tensor2D> fold_weights(const Tensor2D& w, const SmoothScale& scales) {
  if (scales.channels() != w.cols()) {
    throw Error(ErrorCode::ShapeError, "scale channel count does not match weight input channels");
  }
  std::vector<Tensor2D> folded;
  folded.reserve(scales.ranges());
  for (std::size_t r = 0; r < scales.ranges(); ++r) {
    Tensor2D f = w;
    const auto s = scales.column(r);
    for (std::size_t o = 0; o < f.rows(); ++o) {
      auto row = f.row(o);
      for (std::size_t i = 0; i < row.size(); ++i) row[i] *= s[i];
    }
    folded.push_back(std::move(f));
  }
  return folded;
}

}  // namespace stq
