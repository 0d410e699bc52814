// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "test_util.hpp"
#include "stq/audit.hpp"
#include "stq/error.hpp"
#include "stq/quant_core.hpp"

namespace {

using namespace stq;
using testutil::code_of;

Tensor2D row_tensor(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor2D(1, n, std::move(v));
}

TEST(ComputeParams, SymmetricUnitRangeAt8Bits) {
  const QuantParams p = compute_params(row_tensor({-1.0, 0.25, 1.0}), BitWidth(8), Granularity::PerTensor);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.delta[0], 0.0078125);
  EXPECT_EQ(p.zero[0], -128);
}

TEST(ComputeParams, ConstantChannelGetsFloor) {
  const QuantParams p = compute_params(row_tensor({0.0, 0.0}), BitWidth(8), Granularity::PerChannel);
  EXPECT_EQ(p.delta[0], kDeltaFloor);
  EXPECT_EQ(p.zero[0], 0);
}

TEST(ComputeParams, PerChannelTwoRowsAt4Bits) {
  const Tensor2D w(2, 2, {-1.0, 1.0, -2.0, 2.0});
  const QuantParams p = compute_params(w, BitWidth(4), Granularity::PerChannel);
  EXPECT_EQ(p.delta, (std::vector<double>{0.125, 0.25}));
  EXPECT_EQ(p.zero, (std::vector<std::int32_t>{-8, -8}));
}

TEST(ComputeParams, RejectsNonFiniteInput) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { compute_params(row_tensor({0.0, nan}), BitWidth(8), Granularity::PerTensor); }),
            ErrorCode::InvalidInput);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(code_of([&] { compute_params(row_tensor({inf, 1.0}), BitWidth(8), Granularity::PerChannel); }),
            ErrorCode::InvalidInput);
}

TEST(ComputeParams, RejectsZeroPointBeyondInt32) {
  EXPECT_EQ(code_of([] { compute_params(row_tensor({1e9, 1e9 + 1e-3}), BitWidth(2), Granularity::PerTensor); }),
            ErrorCode::InvalidInput);
}

TEST(ComputeParams, EmptyTensorCannotBeBuilt) {
  EXPECT_EQ(code_of([] { Tensor2D(0, 3); }), ErrorCode::ShapeError);
}

TEST(BitWidthTest, AcceptsTwoToSixteen) {
  EXPECT_EQ(code_of([] { BitWidth(1); }), ErrorCode::InvalidInput);
  EXPECT_EQ(code_of([] { BitWidth(17); }), ErrorCode::InvalidInput);
  EXPECT_EQ(BitWidth(2).levels(), 4);
  EXPECT_EQ(BitWidth(16).max_level(), 65535);
}

TEST(Quantize, MinimumMapsToLevelZero) {
  const Tensor2D v = row_tensor({-0.7, 0.1, 2.3});
  const QuantizedTensor q = quantize(v, compute_params(v, BitWidth(6), Granularity::PerTensor));
  EXPECT_EQ(q.level(0, 0), 0);
}

TEST(Quantize, MaximumOvershootsAndClampsToTop) {
  const Tensor2D v = row_tensor({-1.0, 0.0, 1.0});
  const QuantParams p = compute_params(v, BitWidth(8), Granularity::PerTensor);
  EXPECT_EQ(oracle::round_half_even(1.0 / p.delta[0]) - p.zero[0], 256.0);
  EXPECT_EQ(quantize(v, p).level(0, 2), 255);
}

TEST(Quantize, ZeroInSymmetricRangeIsMidLevel) {
  const Tensor2D v = row_tensor({-1.0, 0.0, 1.0});
  EXPECT_EQ(quantize(v, compute_params(v, BitWidth(8), Granularity::PerTensor)).level(0, 1), 128);
}

TEST(Quantize, RoundsHalfToEven) {
  // delta 1/4 after min-max over [-2, 2] at 4 bits; 0.375/0.25 = 1.5 and 0.625/0.25 = 2.5.
  const Tensor2D v = row_tensor({-2.0, 0.375, 0.625, 2.0});
  const QuantParams p = compute_params(v, BitWidth(4), Granularity::PerTensor);
  ASSERT_EQ(p.delta[0], 0.25);
  const QuantizedTensor q = quantize(v, p);
  EXPECT_EQ(q.level(0, 1), 2 + 8);
  EXPECT_EQ(q.level(0, 2), 2 + 8);
}

TEST(Quantize, ParamCountMismatchIsShapeError) {
  const Tensor2D v(2, 2, {1, 2, 3, 4});
  QuantParams p = compute_params(v, BitWidth(8), Granularity::PerChannel);
  const Tensor2D three(3, 2);
  EXPECT_EQ(code_of([&] { quantize(three, p); }), ErrorCode::ShapeError);
}

TEST(Dequantize, LevelZeroSitsWithinHalfBinOfMinimum) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor2D v = oracle::random_tensor(rng, 1, 16, 3.0);
    const QuantParams p = compute_params(v, BitWidth(5), Granularity::PerTensor);
    const double lo = *std::min_element(v.values().begin(), v.values().end());
    EXPECT_LE(std::abs(p.zero[0] - lo / p.delta[0]), 0.5);
  }
}

TEST(Dequantize, ConstantTensorReconstructs) {
  for (double c : {0.0, 3.7, -12.5, 1e6, -4.5e7}) {
    const Tensor2D v = row_tensor({c, c, c});
    const QuantParams p = compute_params(v, BitWidth(8), Granularity::PerTensor);
    const Tensor2D back = dequantize(quantize(v, p));
    for (double b : back.values()) EXPECT_LE(std::abs(b - c), p.delta[0] / 2) << c;
    if (std::abs(c) < 10.0) {
      for (double b : back.values()) EXPECT_LE(std::abs(b - c), kDeltaFloor / 2) << c;
    }
  }
}

TEST(RoundTrip, InRangeWithinHalfBinAndGeneralBoundHolds) {
  Rng rng(2024);
  for (int bits : {4, 6, 8}) {
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t rows = 1 + rng.next_u64() % 6;
      const std::size_t cols = 1 + rng.next_u64() % 24;
      const Tensor2D v = oracle::random_tensor(rng, rows, cols, rng.uniform(0.01, 50.0));
      const auto g = trial % 2 == 0 ? Granularity::PerTensor : Granularity::PerChannel;
      const QuantParams p = compute_params(v, BitWidth(bits), g);
      const Tensor2D back = dequantize(quantize(v, p));
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t k = p.index_for_row(r);
        const double d = p.delta[k];
        const double z = p.zero[k];
        for (std::size_t c = 0; c < cols; ++c) {
          const double x = v(r, c);
          const double err = std::abs(x - back(r, c));
          if (in_quant_range(x, d, p.zero[k], BitWidth(bits))) {
            EXPECT_LE(err, d / 2);
          }
          const double lo = (z - 0.5) * d;
          const double hi = (z + std::ldexp(1.0, bits) - 0.5) * d;
          const double clamped = std::min(std::max(x, lo), hi);
          EXPECT_LE(err, d / 2 + std::abs(x - clamped) + 1e-12 * std::abs(x));
        }
      }
    }
  }
}

TEST(RoundTrip, MatchesScalarOracle) {
  Rng rng(5);
  for (int bits : {2, 3, 8, 12, 16}) {
    const Tensor2D v = oracle::random_tensor(rng, 5, 9, 2.0);
    const QuantParams p = compute_params(v, BitWidth(bits), Granularity::PerChannel);
    const Tensor2D back = dequantize(quantize(v, p));
    for (std::size_t r = 0; r < v.rows(); ++r) {
      const oracle::Params op = oracle::row_params(v, r, bits);
      EXPECT_EQ(p.delta[r], op.delta);
      EXPECT_EQ(p.zero[r], op.zero);
      for (std::size_t c = 0; c < v.cols(); ++c) EXPECT_EQ(back(r, c), oracle::fake(v(r, c), op, bits));
    }
  }
}

TEST(Properties, ChannelWiseDeltaNeverExceedsTensorWise) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor2D w = oracle::random_tensor(rng, 8, 12, rng.uniform(0.1, 4.0));
    const QuantParams cw = compute_params(w, BitWidth(8), Granularity::PerChannel);
    const QuantParams tw = compute_params(w, BitWidth(8), Granularity::PerTensor);
    for (double d : cw.delta) EXPECT_LE(d, tw.delta[0]);
  }
}

TEST(Properties, RoundTripMseNonIncreasingInBits) {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const Tensor2D v = oracle::random_tensor(rng, 4, 32, 1.5);
    double previous = std::numeric_limits<double>::infinity();
    for (int bits = 2; bits <= 16; ++bits) {
      const Tensor2D back = dequantize(quantize(v, compute_params(v, BitWidth(bits), Granularity::PerTensor)));
      double mse = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) mse += std::pow(v.values()[i] - back.values()[i], 2);
      EXPECT_LE(mse, previous) << "bits " << bits;
      previous = mse;
    }
  }
}

TEST(Properties, LevelsStayInBoundsForForeignData) {
  Rng rng(3);
  for (int bits : {2, 4, 8, 16}) {
    // Parameters fitted on a narrow tensor, applied to much wider data.
    const Tensor2D fit = oracle::random_tensor(rng, 1, 8, 0.1);
    const QuantParams p = compute_params(fit, BitWidth(bits), Granularity::PerTensor);
    const QuantizedTensor q = quantize(oracle::random_tensor(rng, 6, 50, 100.0), p);
    for (std::uint16_t l : q.levels()) EXPECT_LE(l, BitWidth(bits).max_level());
  }
}

TEST(QuantizedTensorTest, RejectsLevelsAboveTop) {
  QuantParams p = tensor_params_from_extrema(0.0, 1.0, BitWidth(2));
  EXPECT_EQ(code_of([&] { QuantizedTensor(1, 2, {1, 4}, p); }), ErrorCode::InvalidInput);
  EXPECT_EQ(code_of([&] { QuantizedTensor(1, 3, {1, 2}, p); }), ErrorCode::ShapeError);
}

// Sum over i of (lx + zx)(lw + zw), scaled once: the fixed-order definition.
Tensor2D offset_oracle(const Tensor2D& x, const Tensor2D& w, int xb, int wb, bool per_token) {
  Tensor2D y(x.rows(), w.rows());
  const oracle::Params xt = oracle::tensor_params(x, xb);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const oracle::Params xp = per_token ? oracle::row_params(x, t, xb) : xt;
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const oracle::Params wp = oracle::row_params(w, o, wb);
      double acc = 0.0;
      for (std::size_t i = 0; i < x.cols(); ++i) {
        acc += (oracle::level(x(t, i), xp, xb) + xp.zero) * (oracle::level(w(o, i), wp, wb) + wp.zero);
      }
      y(t, o) = acc * (xp.delta * wp.delta);
    }
  }
  return y;
}

TEST(FakeQuantLinear, MatchesScalarReferenceLoopExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor2D x = oracle::random_tensor(rng, 4, 4);
    const Tensor2D w = oracle::random_tensor(rng, 4, 4);
    const Tensor2D y = fake_quant_linear(x, w, compute_params(w, BitWidth(8), Granularity::PerChannel),
                                         compute_params(x, BitWidth(8), Granularity::PerTensor));
    EXPECT_EQ(y, offset_oracle(x, w, 8, 8, false));
  }
}

TEST(FakeQuantLinear, AgreesWithDequantizeThenMultiply) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor2D x = oracle::random_tensor(rng, 6, 10);
    const Tensor2D w = oracle::random_tensor(rng, 5, 10);
    const QuantParams wq = compute_params(w, BitWidth(6), Granularity::PerChannel);
    const QuantParams xq = compute_params(x, BitWidth(6), Granularity::PerTensor);
    const Tensor2D expected = oracle::matmul(dequantize(quantize(x, xq)), dequantize(quantize(w, wq)));
    EXPECT_LE(oracle::frobenius_rel(fake_quant_linear(x, w, wq, xq), expected), 1e-14);
  }
}

TEST(FakeQuantLinear, IdentityWeightReproducesDequantizedInputUpToTopClamp) {
  Rng rng(6);
  const Tensor2D x = oracle::random_tensor(rng, 5, 4);
  const Tensor2D w = Tensor2D::identity(4);
  const QuantParams xq = compute_params(x, BitWidth(8), Granularity::PerTensor);
  const Tensor2D y = fake_quant_linear(x, w, compute_params(w, BitWidth(8), Granularity::PerChannel), xq);
  const Tensor2D xd = dequantize(quantize(x, xq));
  // Each identity row spans [0, 1]; the unit entry is the row maximum and
  // lands on level 255 of 256.
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t c = 0; c < x.cols(); ++c) EXPECT_DOUBLE_EQ(y(t, c), xd(t, c) * (255.0 / 256.0));
  }
}

TEST(FakeQuantLinear, SixteenBitExactGridMatchesFloat) {
  // Values on the 2^-15 grid of [-1, 1]. The clamped maxima (x(0,0) and the
  // +1 of every weight row) meet zero partners, so no clamp error reaches y.
  Tensor2D x(4, 4, {1.0, 0.5, -0.25, 0.0,  //
                    -1.0, 0.125, 0.75, 0.0,  //
                    0.375, -0.5, 0.0625, 0.0,  //
                    -0.875, 0.25, -0.5, 0.0});
  Tensor2D w(3, 4, {0.0, -1.0, 0.5, 1.0,  //
                    0.0, 0.25, -1.0, 1.0,  //
                    0.0, -1.0, -0.75, 1.0});
  const Tensor2D y = fake_quant_linear(x, w, compute_params(w, BitWidth(16), Granularity::PerChannel),
                                       compute_params(x, BitWidth(16), Granularity::PerTensor));
  EXPECT_LE(oracle::frobenius_rel(y, oracle::matmul(x, w)), 1e-6);
}

TEST(FakeQuantLinear, SixteenBitRandomDataStaysNearFloat) {
  Rng rng(16);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor2D x = oracle::random_tensor(rng, 16, 32);
    const Tensor2D w = oracle::random_tensor(rng, 16, 32);
    const Tensor2D y = fake_quant_linear(x, w, compute_params(w, BitWidth(16), Granularity::PerChannel),
                                         compute_params(x, BitWidth(16), Granularity::PerTensor));
    worst = std::max(worst, oracle::frobenius_rel(y, oracle::matmul(x, w)));
  }
  EXPECT_LE(worst, 1e-3);
}

TEST(FakeQuantLinear, InnerDimensionMismatch) {
  const Tensor2D x(2, 3), w(2, 4);
  const QuantParams p = tensor_params_from_extrema(-1, 1, BitWidth(8));
  EXPECT_EQ(code_of([&] { fake_quant_linear(x, w, p, p); }), ErrorCode::ShapeError);
}

TEST(IntegerLinear, ZeroLevelsAndZerosGiveZeroMatrix) {
  QuantParams p{{0.5}, {0}, BitWidth(8), Granularity::PerTensor};
  const QuantizedTensor a(3, 4, std::vector<std::uint16_t>(12, 0), p);
  const QuantizedTensor b(2, 4, std::vector<std::uint16_t>(8, 0), p);
  const Tensor2D y = integer_linear(a, b);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(IntegerLinear, OneByOneHandExample) {
  const QuantizedTensor x(1, 1, {3}, QuantParams{{0.5}, {-2}, BitWidth(8), Granularity::PerTensor});
  const QuantizedTensor w(1, 1, {5}, QuantParams{{0.25}, {-1}, BitWidth(8), Granularity::PerChannel});
  EXPECT_EQ(integer_linear(x, w)(0, 0), 0.5);
}

TEST(IntegerLinear, EqualsFakeQuantOnRandomInputs) {
  Rng rng(21);
  for (int bits : {4, 8}) {
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor2D x = oracle::random_tensor(rng, 8, 8, 3.0);
      const Tensor2D w = oracle::random_tensor(rng, 8, 8);
      const QuantizedTensor xq = quantize(x, compute_params(x, BitWidth(bits), Granularity::PerTensor));
      const QuantizedTensor wq = quantize(w, compute_params(w, BitWidth(bits), Granularity::PerChannel));
      EXPECT_EQ(integer_linear(xq, wq), fake_quant_matmul(xq, wq));
    }
  }
}

TEST(IntegerLinear, FlagsAccumulatorOverflowRisk) {
  const std::int32_t big = 1 << 30;
  const QuantizedTensor x(1, 32, std::vector<std::uint16_t>(32, 0),
                          QuantParams{{1.0}, {big}, BitWidth(8), Granularity::PerTensor});
  const QuantizedTensor w(1, 32, std::vector<std::uint16_t>(32, 0),
                          QuantParams{{1.0}, {big}, BitWidth(8), Granularity::PerChannel});
  EXPECT_EQ(code_of([&] { integer_linear(x, w); }), ErrorCode::OverflowRisk);
}

TEST(DynamicTokenQuant, SingleTokenMatchesPerTensor) {
  Rng rng(31);
  const Tensor2D x = oracle::random_tensor(rng, 1, 20);
  const QuantizedTensor d = dynamic_token_quant(x, BitWidth(8));
  const QuantParams p = compute_params(x, BitWidth(8), Granularity::PerTensor);
  const QuantizedTensor s = quantize(x, p);
  EXPECT_EQ(d.params().delta, p.delta);
  EXPECT_EQ(d.params().zero, p.zero);
  EXPECT_TRUE(std::equal(d.levels().begin(), d.levels().end(), s.levels().begin(), s.levels().end()));
}

TEST(DynamicTokenQuant, PerTokenDeltas) {
  const Tensor2D x(2, 3, {0.0, 0.5, 1.0, 0.0, 50.0, 100.0});
  const QuantizedTensor q = dynamic_token_quant(x, BitWidth(8));
  EXPECT_EQ(q.params().delta, (std::vector<double>{1.0 / 256, 100.0 / 256}));
}

TEST(DynamicTokenQuant, ConstantRowsReconstruct) {
  const Tensor2D x(2, 3, {1.5, 1.5, 1.5, -0.25, -0.25, -0.25});
  const Tensor2D back = dequantize(dynamic_token_quant(x, BitWidth(8)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(back.values()[i] - x.values()[i]), kDeltaFloor / 2);
}

TEST(DynamicTokenQuant, RecordsOneStatisticPerCall) {
  audit::StatisticAudit trace;
  {
    const audit::ScopedAudit scope(trace);
    Rng rng(1);
    for (int i = 0; i < 3; ++i) dynamic_token_quant(oracle::random_tensor(rng, 4, 4), BitWidth(8));
  }
  EXPECT_EQ(trace.statistics(), 3u);
}

TEST(DynamicTokenQuant, RejectsNonFinite) {
  const Tensor2D x(1, 2, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_EQ(code_of([&] { dynamic_token_quant(x, BitWidth(8)); }), ErrorCode::InvalidInput);
}

}  // namespace
