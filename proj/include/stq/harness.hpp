// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Fidelity measurement and the ablation drivers behind the CLI.
 *
 * Every quantized run is compared against the same model's float output for
 * the same prompt and noise seed. Row metrics are means over the evaluation
 * prompts of the per-prompt MSE, cosine similarity and PSNR (peak = max |ref|).
 */

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stq/calibration.hpp"
#include "stq/engine.hpp"
#include "stq/toy_model.hpp"

namespace stq::harness {

inline constexpr std::string_view kReportSchema = "stq.fidelity-report/1";
/// Reported in place of an unbounded PSNR or SNR when the error is zero.
inline constexpr double kDbCap = 300.0;

struct Metrics {
  double mse = 0.0;
  double cosine = 1.0;
  double psnr_db = kDbCap;
};

Metrics compare_outputs(const Tensor2D& reference, const Tensor2D& output);
Metrics mean_metrics(std::span<const Metrics> metrics);
double snr_db(double signal_energy, double noise_energy);

/// Wraps an executor and accumulates, per (layer, step), the energy of the
/// float product x W^T and of the wrapped executor's deviation from it.
class SnrProbe final : public toy::LinearExecutor {
 public:
  SnrProbe(toy::LinearExecutor& inner, std::size_t layers, int steps);

  Tensor2D linear(const toy::Linear& layer, int step, const Tensor2D& x) override;
  std::optional<int> expected_steps() const override { return inner_.expected_steps(); }

  /// [layer][step] in dB.
  std::vector<std::vector<double>> snr_db() const;

 private:
  toy::LinearExecutor& inner_;
  int steps_;
  std::vector<double> signal_;
  std::vector<double> noise_;
};

struct RunRow {
  std::string scheme;  // e.g. "FP", "Dynamic", "*+ASQ"
  ExecutorKind executor = ExecutorKind::FloatReference;
  int w_bits = 0;  // 0 for the float reference
  int a_bits = 0;
  int ranges = 0;  // 0 when no table is involved
  double alpha = 0.0;
  Metrics metrics;
  std::uint64_t runtime_statistic_ops = 0;
  std::uint64_t linear_calls = 0;
  std::optional<std::uint64_t> table_bytes;
  std::vector<std::vector<double>> layer_step_snr_db;  // [layer][step], empty unless probed
};

struct SchemeAverage {
  std::string scheme;
  std::size_t rows = 0;
  Metrics metrics;
};

struct AlphaSection {
  std::string scheme;
  double best_alpha = 0.0;
  std::vector<AlphaScore> scores;
};

struct FidelityReport {
  std::string command;
  ModelSignature model;
  std::vector<std::string> layer_ids;
  int steps = 0;
  double cfg_scale = 0.0;
  std::size_t eval_prompts = 0;
  std::uint64_t eval_seed = 0;
  std::vector<RunRow> rows;
  std::vector<SchemeAverage> averages;
  std::optional<AlphaSection> alpha;
};

/// Self-describing JSON with full-precision numbers.
std::string to_json(const FidelityReport& report);
/// Aligned plain-text table with rounded numbers.
std::string to_text(const FidelityReport& report);

/// Per-scheme arithmetic means of the rows, in first-appearance order.
std::vector<SchemeAverage> scheme_averages(const std::vector<RunRow>& rows);

class Evaluator {
 public:
  /// Runs the float reference for every prompt once.
  Evaluator(const toy::ToyModel& model, toy::DiffusionSchedule schedule, CalibrationSet prompts,
            std::uint64_t eval_seed);

  RunRow run(std::string scheme, QuantizedExecutor& executor, bool probe_snr) const;
  /// Mean cosine similarity to the float reference.
  double mean_cosine(QuantizedExecutor& executor) const;

  const toy::ToyModel& model() const noexcept { return *model_; }
  const toy::DiffusionSchedule& schedule() const noexcept { return schedule_; }
  const CalibrationSet& prompts() const noexcept { return prompts_; }
  const std::vector<Tensor2D>& references() const noexcept { return references_; }

  /// Report shell carrying the model and evaluation settings.
  FidelityReport report(std::string command) const;

 private:
  const toy::ToyModel* model_;
  toy::DiffusionSchedule schedule_;
  CalibrationSet prompts_;
  std::uint64_t eval_seed_;
  std::vector<Tensor2D> references_;
};

enum class SchemeKind { CwTw, Asq, TsqTsw };

/// "cw-tw", "asq", "tsq-tsw". Throws InvalidConfig.
SchemeKind parse_scheme(std::string_view name);
const char* to_string(SchemeKind kind) noexcept;

/// Default-filled, validated config. Unset ranges: 1 for cw-tw and asq,
/// every step for tsq-tsw. Unset alpha: the scheme default. Throws InvalidConfig.
QuantConfig make_config(SchemeKind kind, BitWidth w_bits, BitWidth a_bits, std::optional<int> ranges,
                        std::optional<double> alpha, int total_steps);

/// Row for a calibrated table bound as StaticFakeQuant.
RunRow run_table(const Evaluator& eval, const TimeStepTable& table, bool probe_snr);

std::vector<std::pair<int, int>> default_bit_grid();  // (w, a)
std::vector<int> default_range_list();

struct SweepScheme {
  SchemeKind kind;
  std::optional<int> ranges;
  std::optional<double> alpha;
};

/// Scheme x bit-pair matrix plus per-scheme averages. Statistics come from
/// one float calibration pass shared by every cell.
FidelityReport bitsweep(const ObservationLog& log, const Evaluator& eval, const std::vector<SweepScheme>& schemes,
                        const std::vector<std::pair<int, int>>& bits, double momentum = kDefaultMomentum);

/// One row per range count, with the encoded table size in bytes.
FidelityReport trsweep(const ObservationLog& log, const Evaluator& eval, SchemeKind kind, BitWidth w_bits,
                       BitWidth a_bits, const std::vector<int>& ranges, std::optional<double> alpha,
                       double momentum = kDefaultMomentum);

/// Ten-point alpha grid scored by mean cosine to the float reference.
FidelityReport alpha_sweep_report(const ObservationLog& log, const Evaluator& eval, const QuantConfig& config);

}  // namespace stq::harness
