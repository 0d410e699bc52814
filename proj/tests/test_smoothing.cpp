// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "stq/audit.hpp"
#include "stq/smoothing.hpp"
#include "test_util.hpp"

namespace {

using namespace stq;
using testutil::code_of;

std::vector<double> column_absmax(const Tensor2D& t) {
  std::vector<double> out(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) out[c] = std::max(out[c], std::fabs(t(r, c)));
  }
  return out;
}

std::vector<double> positive_vector(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& e : v) e = rng.uniform(lo, hi);
  return v;
}

TEST(WeightAbsMax, ReducesOverOutputRows) {
  const Tensor2D w(2, 3, {1.0, -4.0, 0.5, -2.0, 3.0, 0.0});
  EXPECT_EQ(weight_absmax(w), (std::vector<double>{2.0, 4.0, 0.5}));
}

TEST(BatchChannelAbsMax, AveragesPerSampleMaxima) {
  // Two samples of two rows each.
  const Tensor2D x(4, 2, {1.0, -1.0,  //
                          -3.0, 0.5,  //
                          0.5, 2.0,   //
                          -1.0, -6.0});
  EXPECT_EQ(batch_channel_absmax(x, 1), (std::vector<double>{3.0, 6.0}));
  EXPECT_EQ(batch_channel_absmax(x, 2), (std::vector<double>{2.0, 3.5}));
  EXPECT_EQ(code_of([&] { batch_channel_absmax(x, 3); }), ErrorCode::ShapeError);
}

TEST(RunningAbsMax, FirstObservationInitialisesThenBlends) {
  ChannelAbsMax state;
  state = update_running_absmax(state, Tensor2D(1, 1, {3.0}), 0.9);
  EXPECT_EQ(state.x_absmax[0], 3.0);
  state = update_running_absmax(state, Tensor2D(1, 1, {-12.0}), 0.9);
  EXPECT_NEAR(state.x_absmax[0], 3.9, 1e-15);
  EXPECT_EQ(state.observations, 2u);
}

TEST(RunningAbsMax, ConvergesGeometricallyToAConstantStatistic) {
  const double m = 0.95;
  ChannelAbsMax state;
  const std::vector<double> first{10.0};
  const std::vector<double> steady{2.0};
  apply_running_absmax(state, first, m);
  for (int n = 1; n <= 200; ++n) {
    apply_running_absmax(state, steady, m);
    EXPECT_NEAR(state.x_absmax[0], 2.0 + std::pow(m, n) * 8.0, 1e-12);
  }
}

TEST(RunningAbsMax, RejectsMomentumOutsideUnitInterval) {
  ChannelAbsMax state;
  const std::vector<double> stat{1.0};
  EXPECT_EQ(code_of([&] { apply_running_absmax(state, stat, 1.0); }), ErrorCode::InvalidInput);
  EXPECT_EQ(code_of([&] { apply_running_absmax(state, stat, -0.1); }), ErrorCode::InvalidInput);
}

TEST(ComputeScales, HalfAlphaExample) {
  ChannelAbsMax stats{{16.0, 1.0}, {1.0, 4.0}, 1};
  const std::vector<double> s = compute_scales(stats, 0.5);
  EXPECT_DOUBLE_EQ(s[0], 4.0);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(ComputeScales, ZeroStatisticsGiveUnitScale) {
  ChannelAbsMax stats{{0.0, 2.0, 3.0}, {1.0, 0.0, 3.0}, 1};
  const std::vector<double> s = compute_scales(stats, 0.3);
  EXPECT_EQ(s[0], 1.0);
  EXPECT_EQ(s[1], 1.0);
}

TEST(ComputeScales, AlphaOneNormalisesActivationChannels) {
  Rng rng(7);
  const Tensor2D x = oracle::random_tensor(rng, 12, 8, 5.0);
  const Tensor2D w = oracle::random_tensor(rng, 6, 8);
  ChannelAbsMax stats{column_absmax(x), weight_absmax(w), 1};
  const SmoothedPair p = apply_smoothing(x, w, compute_scales(stats, 1.0));
  for (double a : column_absmax(p.x)) EXPECT_NEAR(a, 1.0, 1e-15);
}

TEST(ComputeScales, HalfAlphaBalancesTheTwoSides) {
  Rng rng(17);
  const Tensor2D x = oracle::random_tensor(rng, 12, 8, 5.0);
  const Tensor2D w = oracle::random_tensor(rng, 6, 8);
  ChannelAbsMax stats{column_absmax(x), weight_absmax(w), 1};
  const SmoothedPair p = apply_smoothing(x, w, compute_scales(stats, 0.5));
  const auto xa = column_absmax(p.x);
  const auto wa = column_absmax(p.w);
  for (std::size_t i = 0; i < xa.size(); ++i) EXPECT_NEAR(xa[i] / wa[i], 1.0, 1e-12);
}

TEST(ComputeScales, PositiveForPositiveStatistics) {
  Rng rng(27);
  for (int trial = 0; trial < 200; ++trial) {
    ChannelAbsMax stats{positive_vector(rng, 16, 1e-6, 1e3), positive_vector(rng, 16, 1e-6, 1e3), 1};
    const double alpha = rng.uniform();
    for (double s : compute_scales(stats, alpha)) {
      EXPECT_GT(s, 0.0);
      EXPECT_TRUE(std::isfinite(s));
    }
  }
}

TEST(ComputeScales, RejectsBadAlphaAndLengths) {
  ChannelAbsMax stats{{1.0}, {1.0}, 1};
  EXPECT_EQ(code_of([&] { compute_scales(stats, 1.5); }), ErrorCode::InvalidInput);
  ChannelAbsMax uneven{{1.0, 2.0}, {1.0}, 1};
  EXPECT_EQ(code_of([&] { compute_scales(uneven, 0.5); }), ErrorCode::ShapeError);
}

TEST(ApplySmoothing, ProductIsPreserved) {
  Rng rng(37);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor2D x = oracle::random_tensor(rng, 7, 9, 4.0);
    const Tensor2D w = oracle::random_tensor(rng, 5, 9);
    const std::vector<double> s = positive_vector(rng, 9, 0.05, 20.0);
    const SmoothedPair p = apply_smoothing(x, w, s);
    EXPECT_LE(oracle::frobenius_rel(oracle::matmul(p.x, p.w), oracle::matmul(x, w)), 1e-12);
  }
}

TEST(ApplySmoothing, RejectsNonPositiveScales) {
  const Tensor2D x(1, 2, {1.0, 2.0}), w(1, 2, {1.0, 1.0});
  const std::vector<double> zero{1.0, 0.0};
  const std::vector<double> negative{-1.0, 1.0};
  const std::vector<double> short_s{1.0};
  EXPECT_EQ(code_of([&] { apply_smoothing(x, w, zero); }), ErrorCode::NonPositiveScale);
  EXPECT_EQ(code_of([&] { apply_smoothing(x, w, negative); }), ErrorCode::NonPositiveScale);
  EXPECT_EQ(code_of([&] { apply_smoothing(x, w, short_s); }), ErrorCode::ShapeError);
}

TEST(FoldWeights, SingleRangeMatchesApplySmoothing) {
  Rng rng(47);
  const Tensor2D x = oracle::random_tensor(rng, 3, 6);
  const Tensor2D w = oracle::random_tensor(rng, 4, 6);
  const std::vector<double> s = positive_vector(rng, 6, 0.1, 10.0);
  const auto folded = fold_weights(w, SmoothScale(0.5, {s}));
  ASSERT_EQ(folded.size(), 1u);
  EXPECT_EQ(folded[0], apply_smoothing(x, w, s).w);
}

TEST(FoldWeights, OneWeightPerRangeScaledByItsColumn) {
  Rng rng(57);
  const Tensor2D w = oracle::random_tensor(rng, 4, 5);
  std::vector<std::vector<double>> cols;
  for (int r = 0; r < 3; ++r) cols.push_back(positive_vector(rng, 5, 0.1, 10.0));
  cols.push_back(cols[1]);
  const auto folded = fold_weights(w, SmoothScale(0.2, cols));
  ASSERT_EQ(folded.size(), 4u);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t o = 0; o < 4; ++o) {
      for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(folded[r](o, i), w(o, i) * cols[r][i]);
    }
  }
  EXPECT_EQ(folded[1], folded[3]);
}

TEST(FoldWeights, IdentityScalesLeaveWeightUnchanged) {
  Rng rng(67);
  const Tensor2D w = oracle::random_tensor(rng, 3, 4);
  for (const Tensor2D& f : fold_weights(w, SmoothScale::identity(4, 2))) EXPECT_EQ(f, w);
}

TEST(SmoothScaleTest, ValidatesColumns) {
  EXPECT_EQ(code_of([] { SmoothScale(0.5, {}); }), ErrorCode::ShapeError);
  EXPECT_EQ(code_of([] { SmoothScale(0.5, {{1.0, 2.0}, {1.0}}); }), ErrorCode::ShapeError);
  EXPECT_EQ(code_of([] { SmoothScale(0.5, {{1.0, -2.0}}); }), ErrorCode::NonPositiveScale);
}

TEST(Audit, WeightAndBatchReductionsAreCounted) {
  audit::StatisticAudit trace;
  {
    const audit::ScopedAudit scope(trace);
    weight_absmax(Tensor2D(2, 2));
    batch_channel_absmax(Tensor2D(2, 2), 2);
    compute_scales(ChannelAbsMax{{1.0}, {1.0}, 1}, 0.5);
  }
  EXPECT_EQ(trace.statistics(), 2u);
}

}  // namespace
