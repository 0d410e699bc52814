// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "stq/audit.hpp"
#include "stq/calibration.hpp"
#include "stq/engine.hpp"
#include "stq/error.hpp"
#include "stq/harness.hpp"
#include "stq/quant_core.hpp"
#include "stq/smoothing.hpp"
#include "stq/table_file.hpp"
#include "stq/toy_model.hpp"

namespace {

using namespace stq;
using Clock = std::chrono::steady_clock;

// Pinned limits.
constexpr int kRoundTripTensors = 10000;
constexpr double kRoundTripSeconds = 10.0;
constexpr int kSmoothingTriples = 1000;
constexpr double kSmoothingTolerance = 1e-6;
constexpr double kSmoothingSeconds = 5.0;
constexpr int kEquivalenceTrials = 1000;
constexpr double kEquivalenceSeconds = 10.0;
constexpr double kNearLosslessCosine = 0.999;
constexpr double kTrendSeconds = 120.0;
constexpr int kTableRoundTrips = 100;
constexpr std::uint64_t kEvalSeed = 2;
constexpr int kEvalPrompts = 10;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const std::filesystem::path kCalibrationFixture = std::filesystem::path(STQ_SOURCE_DIR) / "data/calibration_set.txt";

Outcome round_trip_bound() {
  const auto start = Clock::now();
  Rng rng(101);
  std::uint64_t checked = 0, violations = 0;
  double worst = 0.0;  // max err / (delta / 2) over in-range elements
  for (int n = 0; n < kRoundTripTensors; ++n) {
    const int bits = 4 + 2 * (n % 3);
    const std::size_t rows = 1 + rng.next_u64() % 8;
    const std::size_t cols = 1 + rng.next_u64() % 64;
    const Tensor2D v = oracle::random_tensor(rng, rows, cols, std::exp(rng.uniform(-6.0, 6.0)));
    const auto g = n % 2 == 0 ? Granularity::PerChannel : Granularity::PerTensor;
    const QuantParams p = compute_params(v, BitWidth(bits), g);
    const Tensor2D back = dequantize(quantize(v, p));
    const double top = std::ldexp(1.0, bits) - 1.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t k = p.index_for_row(r);
      const double d = p.delta[k];
      for (std::size_t c = 0; c < cols; ++c) {
        const double unclamped = oracle::round_half_even(v(r, c) / d) - p.zero[k];
        if (unclamped < 0.0 || unclamped > top) continue;
        ++checked;
        const double err = std::fabs(v(r, c) - back(r, c));
        worst = std::fmax(worst, err / (d / 2));
        if (err > d / 2) ++violations;
      }
    }
  }
  const double t = seconds_since(start);
  return {violations == 0 && t < kRoundTripSeconds,
          fmt("%d tensors, %" PRIu64 " in-range elements, %" PRIu64 " over delta/2, worst %.6f of bound, %.2f s (limit %.0f s)",
              kRoundTripTensors, checked, violations, worst, t, kRoundTripSeconds)};
}

Outcome smoothing_exactness() {
  const auto start = Clock::now();
  Rng rng(202);
  double worst = 0.0;
  for (int n = 0; n < kSmoothingTriples; ++n) {
    const std::size_t tokens = 1 + rng.next_u64() % 32;
    const std::size_t in = 1 + rng.next_u64() % 32;
    const std::size_t out = 1 + rng.next_u64() % 32;
    Tensor2D x = oracle::random_tensor(rng, tokens, in);
    // A few outlier channels, as in real activations.
    for (std::size_t i = 0; i < in; ++i) {
      if (rng.uniform() < 0.15) {
        const double gain = rng.uniform(10.0, 200.0);
        for (std::size_t t = 0; t < tokens; ++t) x(t, i) *= gain;
      }
    }
    const Tensor2D w = oracle::random_tensor(rng, out, in, 0.1);
    const double alpha = rng.uniform();
    const ChannelAbsMax stats{batch_channel_absmax(x), weight_absmax(w), 1};
    const SmoothedPair s = apply_smoothing(x, w, compute_scales(stats, alpha));
    const Tensor2D exact = oracle::matmul(x, w);
    double norm = 0.0;
    for (double e : exact.values()) norm += e * e;
    if (norm == 0.0) continue;
    worst = std::fmax(worst, oracle::frobenius_rel(oracle::matmul(s.x, s.w), exact));
  }
  const double t = seconds_since(start);
  return {worst <= kSmoothingTolerance && t < kSmoothingSeconds,
          fmt("%d triples, worst relative Frobenius error %.3e (limit %.0e), %.2f s (limit %.0f s)", kSmoothingTriples,
              worst, kSmoothingTolerance, t, kSmoothingSeconds)};
}

Outcome integer_fake_equivalence() {
  const auto start = Clock::now();
  Rng rng(303);
  int mismatched = 0;
  const int bit_choices[] = {2, 4, 8};
  for (int n = 0; n < kEquivalenceTrials; ++n) {
    const int bits = bit_choices[n % 3];
    const std::size_t tokens = 1 + rng.next_u64() % 32;
    const std::size_t in = 1 + rng.next_u64() % 32;
    const std::size_t out = 1 + rng.next_u64() % 32;
    const Tensor2D x = oracle::random_tensor(rng, tokens, in, rng.uniform(0.1, 10.0));
    const Tensor2D w = oracle::random_tensor(rng, out, in);
    const QuantizedTensor xq = quantize(x, compute_params(x, BitWidth(bits), Granularity::PerTensor));
    const QuantizedTensor wq = quantize(w, compute_params(w, BitWidth(bits), Granularity::PerChannel));
    if (!(integer_linear(xq, wq) == fake_quant_matmul(xq, wq))) ++mismatched;
  }
  const double t = seconds_since(start);
  return {mismatched == 0 && t < kEquivalenceSeconds,
          fmt("%d trials up to 32x32, b in {2,4,8}, %d mismatched, %.2f s (limit %.0f s)", kEquivalenceTrials,
              mismatched, t, kEquivalenceSeconds)};
}

Outcome degeneracies(const toy::ToyModel& model, const CalibrationSet& calib, const toy::DiffusionSchedule& schedule) {
  // (a) single-range TSQ vs ASQ, momentum 0, one calibration pass.
  bool a_ok = true;
  {
    const CalibrationSet one{calib.front()};
    QuantConfig asq = QuantConfig::asq(BitWidth(8), BitWidth(8), kAsqAlpha);
    QuantConfig tsq = QuantConfig::tsq(BitWidth(8), BitWidth(8), 1, kAsqAlpha);
    asq.momentum = tsq.momentum = 0.0;
    const TimeStepTable ta = run_calibration(model, one, asq, schedule);
    const TimeStepTable tt = run_calibration(model, one, tsq, schedule);
    for (std::size_t l = 0; l < ta.layers().size(); ++l) {
      const auto sa = ta.layers()[l].scales.column(0);
      const auto st = tt.layers()[l].scales.column(0);
      a_ok = a_ok && std::equal(sa.begin(), sa.end(), st.begin(), st.end());
      a_ok = a_ok && ta.layers()[l].weight_levels == tt.layers()[l].weight_levels;
      a_ok = a_ok && ta.layers()[l].activation == tt.layers()[l].activation;
    }
  }

  const ObservationLog log = collect_observations(model, calib, schedule);
  const int t = schedule.steps;

  // (b) one range per step: an observation at step k lands in range k only.
  bool b_ok = true;
  {
    const TimeRangePartition singleton = partition_steps(t, t);
    for (int k = 0; k < t; ++k) b_ok = b_ok && singleton.range(k) == StepRange{k, k + 1};
    const std::vector<LayerSpec> layers = log.layers();
    for (int k = 0; k < t; ++k) {
      CalibStats probe(singleton, layers, kDefaultMomentum);
      probe.observe(0, k, Tensor2D(1, layers[0].in_channels, std::vector<double>(layers[0].in_channels, 1.0)));
      for (int r = 0; r < t; ++r) b_ok = b_ok && probe.at(0, r).count == (r == k ? 1u : 0u);
    }
    const CalibStats fine = accumulate(log, singleton, kDefaultMomentum);
    std::vector<std::size_t> per_step(t, 0);
    for (const auto& e : log.entries()) {
      if (e.layer == 0) ++per_step[e.step];
    }
    for (int k = 0; k < t; ++k) b_ok = b_ok && fine.at(0, k).count == per_step[k];
  }

  // (c) coarse extrema are the fold of their member steps' extrema.
  bool c_ok = true;
  {
    const CalibStats fine = accumulate(log, partition_steps(t, t), kDefaultMomentum);
    for (int ranges : {1, 2, 4, 10}) {
      const TimeRangePartition p = partition_steps(t, ranges);
      const CalibStats coarse = accumulate(log, p, kDefaultMomentum);
      for (std::size_t l = 0; l < log.layers().size(); ++l) {
        for (std::size_t r = 0; r < p.size(); ++r) {
          std::vector<double> lo = fine.at(l, p.range(r).begin).channel_min;
          std::vector<double> hi = fine.at(l, p.range(r).begin).channel_max;
          for (int s = p.range(r).begin + 1; s < p.range(r).end; ++s) {
            for (std::size_t i = 0; i < lo.size(); ++i) {
              lo[i] = std::fmin(lo[i], fine.at(l, s).channel_min[i]);
              hi[i] = std::fmax(hi[i], fine.at(l, s).channel_max[i]);
            }
          }
          c_ok = c_ok && coarse.at(l, r).channel_min == lo && coarse.at(l, r).channel_max == hi;
          c_ok = c_ok && coarse.at(l, r).min == *std::min_element(lo.begin(), lo.end());
          c_ok = c_ok && coarse.at(l, r).max == *std::max_element(hi.begin(), hi.end());
        }
      }
    }
  }
  return {a_ok && b_ok && c_ok, fmt("(a) R=1 TSQ == ASQ: %s, (b) R=t routing: %s, (c) coarse == fold of steps: %s",
                                    a_ok ? "yes" : "no", b_ok ? "yes" : "no", c_ok ? "yes" : "no")};
}

Outcome runtime_statistics_audit(const toy::ToyModel& model, const CalibrationSet& calib,
                                 const toy::DiffusionSchedule& schedule) {
  const TimeStepTable table = run_calibration(model, calib, QuantConfig::tsq(BitWidth(8), BitWidth(8), schedule.steps),
                                              schedule);
  const std::uint64_t expected_calls = static_cast<std::uint64_t>(schedule.steps) * 2 * model.layers().size();
  std::string detail;
  bool ok = true;
  auto check = [&](QuantizedExecutor exec, bool dynamic) {
    audit::StatisticAudit trace;
    audited_denoise(model, schedule, calib.front().cond, calib.front().seed, exec, trace);
    const AuditReport r = static_op_count_audit(exec, trace);
    const std::uint64_t want = dynamic ? r.linear_calls : 0;
    ok = ok && r.statistic_ops == want && r.linear_calls == expected_calls && r.conforms;
    detail += fmt("%s %" PRIu64 "/%" PRIu64 " calls; ", to_string(r.kind), r.statistic_ops, r.linear_calls);
  };
  check(bind(model, table, ExecutorKind::StaticFakeQuant), false);
  check(bind(model, table, ExecutorKind::StaticInteger), false);
  check(bind_dynamic(model, BitWidth(8), BitWidth(8)), true);
  return {ok, "statistic ops: " + detail + fmt("expected %" PRIu64 " calls", expected_calls)};
}

Outcome near_lossless(const toy::ToyModel& model, const CalibrationSet& calib, const toy::DiffusionSchedule& schedule,
                      const harness::Evaluator& eval) {
  bool ok = true;
  std::string detail = "W16A16 mean cosine:";
  for (const QuantConfig& c : {QuantConfig::cw_tw(BitWidth(16), BitWidth(16)), QuantConfig::asq(BitWidth(16), BitWidth(16)),
                               QuantConfig::tsq(BitWidth(16), BitWidth(16), schedule.steps)}) {
    const TimeStepTable table = run_calibration(model, calib, c, schedule);
    const double cos = harness::run_table(eval, table, false).metrics.cosine;
    ok = ok && cos >= kNearLosslessCosine;
    detail += fmt(" %s %.6f", table.scheme_tag().c_str(), cos);
  }
  return {ok, detail + fmt(" (limit %.3f)", kNearLosslessCosine)};
}

Outcome trend(const toy::ToyModel& model, const CalibrationSet& calib, const toy::DiffusionSchedule& schedule) {
  const auto start = Clock::now();
  const ObservationLog log = collect_observations(model, calib, schedule);
  const harness::Evaluator eval(model, schedule, make_calibration_set(toy::synth_dataset(kEvalPrompts, kEvalSeed, model.config())),
                                kEvalSeed);
  const std::vector<std::pair<int, int>> bits{{8, 8}, {6, 6}, {4, 4}};
  const harness::FidelityReport r = harness::bitsweep(
      log, eval, {{harness::SchemeKind::CwTw, {}, {}}, {harness::SchemeKind::Asq, {}, {}}, {harness::SchemeKind::TsqTsw, {}, {}}},
      bits);
  const double t = seconds_since(start);
  bool monotone = true;
  std::string detail;
  for (std::size_t s = 0; s < 3; ++s) {
    detail += r.rows[3 * s].scheme + fmt(" %.6f/%.6f/%.6f; ", r.rows[3 * s].metrics.cosine,
                                         r.rows[3 * s + 1].metrics.cosine, r.rows[3 * s + 2].metrics.cosine);
    for (std::size_t k = 1; k < 3; ++k) {
      monotone = monotone && r.rows[3 * s + k].metrics.cosine <= r.rows[3 * s + k - 1].metrics.cosine;
    }
  }
  const double cw = r.rows[0].metrics.cosine;
  const bool smoothing_helps = r.rows[3].metrics.cosine >= cw && r.rows[6].metrics.cosine >= cw;
  return {monotone && smoothing_helps && t < kTrendSeconds,
          "cosine at 8/8, 6/6, 4/4: " + detail +
              fmt("non-increasing: %s, smoothing >= CW+TW at 8/8: %s, %.1f s (limit %.0f s)", monotone ? "yes" : "no",
                  smoothing_helps ? "yes" : "no", t, kTrendSeconds)};
}

Outcome table_integrity() {
  toy::ToyModelConfig config;
  config.n_blocks = 1;
  config.d_model = 16;
  config.n_heads = 2;
  config.frames = 2;
  config.spatial_tokens = 4;
  config.cond_dim = 8;
  config.context_tokens = 2;
  config.ff_mult = 2;
  const toy::ToyModel model = toy::build_model(config);
  const toy::DiffusionSchedule schedule = toy::DiffusionSchedule::ddpm(20, 7.0);
  const CalibrationSet calib = make_calibration_set(toy::synth_dataset(2, 1, config));
  const ObservationLog log = collect_observations(model, calib, schedule);

  const auto dir = std::filesystem::temp_directory_path() / ("stq_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  Rng rng(808);
  int exact = 0, undetected = 0;
  std::uint64_t flips = 0;
  const int ranges_choices[] = {1, 2, 4, 5, 10, 20};
  for (int n = 0; n < kTableRoundTrips; ++n) {
    const int w = 2 + static_cast<int>(rng.next_u64() % 15);
    const int a = 2 + static_cast<int>(rng.next_u64() % 15);
    QuantConfig c;
    switch (n % 3) {
      case 0: c = QuantConfig::cw_tw(BitWidth(w), BitWidth(a), ranges_choices[rng.next_u64() % 6]); break;
      case 1: c = QuantConfig::asq(BitWidth(w), BitWidth(a), rng.uniform()); break;
      default: c = QuantConfig::tsq(BitWidth(w), BitWidth(a), ranges_choices[rng.next_u64() % 6], rng.uniform()); break;
    }
    const TimeStepTable table = freeze_table(model, accumulate(log, partition_steps(20, c.ranges), c.momentum), c);
    const auto path = dir / "table.stq";
    save_table(table, path);
    const std::vector<std::uint8_t> bytes = read_file(path);
    const TimeStepTable back = load_table(path);
    save_table(back, path);
    if (back == table && read_file(path) == bytes && bytes == encode_table(table)) ++exact;

    // Every byte position of the first three tables, one flip pattern each.
    if (n < 3) {
      for (std::size_t i = 0; i < bytes.size(); ++i) {
        std::vector<std::uint8_t> bad = bytes;
        bad[i] ^= static_cast<std::uint8_t>(1 + rng.next_u64() % 255);
        ++flips;
        try {
          decode_table(bad);
          ++undetected;
        } catch (const Error&) {
        }
      }
    }
  }
  std::filesystem::remove_all(dir);
  return {exact == kTableRoundTrips && undetected == 0,
          fmt("%d/%d byte-exact save/load round trips, %" PRIu64 " single-byte corruptions, %d undetected", exact,
              kTableRoundTrips, flips, undetected)};
}

std::string calibrate_and_compare(const CalibrationSet& calib) {
  const toy::ToyModel model = toy::build_model(toy::ToyModelConfig{});
  const toy::DiffusionSchedule schedule = toy::DiffusionSchedule::ddpm();
  const TimeStepTable table = run_calibration(model, calib, QuantConfig::tsq(BitWidth(8), BitWidth(8), 20), schedule);
  const std::vector<std::uint8_t> bytes = encode_table(table);
  const harness::Evaluator eval(model, schedule, make_calibration_set(toy::synth_dataset(3, kEvalSeed, model.config())),
                                kEvalSeed);
  harness::FidelityReport report = eval.report("compare");
  QuantizedExecutor fp = bind_float(model);
  report.rows.push_back(eval.run("FP", fp, false));
  QuantizedExecutor dyn = bind_dynamic(model, BitWidth(8), BitWidth(8));
  report.rows.push_back(eval.run("Dynamic", dyn, false));
  report.rows.push_back(harness::run_table(eval, decode_table(bytes), true));
  return std::string(bytes.begin(), bytes.end()) + harness::to_json(report) + harness::to_text(report);
}

Outcome determinism() {
  const std::string first = calibrate_and_compare(load_calibration_set(kCalibrationFixture));
  const std::string second = calibrate_and_compare(load_calibration_set(kCalibrationFixture));
  return {first == second, fmt("two calibrate+compare runs, %zu bytes of table and report each, identical: %s",
                               first.size(), first == second ? "yes" : "no")};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& criterion) {
    Outcome o;
    try {
      o = criterion();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("AC%d %s %s: %s\n", id, o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };

  const toy::ToyModel model = toy::build_model(toy::ToyModelConfig{});
  const toy::DiffusionSchedule schedule = toy::DiffusionSchedule::ddpm();
  const CalibrationSet calib = load_calibration_set(kCalibrationFixture);

  report(1, "round-trip bound", round_trip_bound);
  report(2, "smoothing exactness", smoothing_exactness);
  report(3, "integer/fake-quant equivalence", integer_fake_equivalence);
  report(4, "degeneracy identities", [&] { return degeneracies(model, calib, schedule); });
  report(5, "zero runtime statistics", [&] { return runtime_statistics_audit(model, calib, schedule); });
  report(6, "near-lossless W16A16", [&] {
    const harness::Evaluator eval(model, schedule,
                                  make_calibration_set(toy::synth_dataset(kEvalPrompts, kEvalSeed, model.config())),
                                  kEvalSeed);
    return near_lossless(model, calib, schedule, eval);
  });
  report(7, "bit-width trend", [&] { return trend(model, calib, schedule); });
  report(8, "table file integrity", table_integrity);
  report(9, "determinism", determinism);

  std::printf("%s: %d of 9 criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
