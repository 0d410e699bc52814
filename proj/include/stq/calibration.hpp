// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Offline calibration.
 *
 * The float model is run over the whole calibration set while every
 * quantizable linear's input is reduced to per-sample channel extrema. The
 * reductions are then replayed step by step: at each step, all samples seen
 * by a layer (every prompt, both guidance branches) form one batch and update
 * the accumulator of the time range owning that step. Min/max are running
 * extrema; smoothing abs-max statistics use the momentum running average,
 * restricted to the range. Freezing turns the accumulators into a
 * TimeStepTable of activation parameters, smoothing scales and smoothed,
 * quantized weights per range.
 */

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stq/quant_core.hpp"
#include "stq/smoothing.hpp"
#include "stq/toy_model.hpp"

namespace stq {

inline constexpr double kDefaultMomentum = 0.95;
inline constexpr double kAsqAlpha = 0.4;
inline constexpr double kTsqAlpha = 0.2;

struct StepRange {
  int begin;  // inclusive
  int end;    // exclusive

  int size() const noexcept { return end - begin; }
  friend bool operator==(const StepRange&, const StepRange&) = default;
};

/// Contiguous, ordered, non-empty step ranges covering [0, total_steps).
class TimeRangePartition {
 public:
  TimeRangePartition(int total_steps, std::vector<StepRange> ranges);

  int total_steps() const noexcept { return total_steps_; }
  std::size_t size() const noexcept { return ranges_.size(); }
  const std::vector<StepRange>& ranges() const noexcept { return ranges_; }
  const StepRange& range(std::size_t r) const { return ranges_.at(r); }

  /// Throws StepOutOfRange.
  std::size_t range_of(int step) const;

  friend bool operator==(const TimeRangePartition&, const TimeRangePartition&) = default;

 private:
  int total_steps_;
  std::vector<StepRange> ranges_;
  std::vector<std::size_t> owner_;  // step -> range
};

/// Splits t steps into R contiguous ranges whose sizes differ by at most one,
/// larger ranges first. Throws InvalidPartition unless 1 <= R <= t.
TimeRangePartition partition_steps(int total_steps, int ranges);

enum class Smoothing : std::uint8_t { None = 0, ASQ = 1, TSQ = 2 };

const char* to_string(Smoothing smoothing) noexcept;

struct QuantConfig {
  BitWidth w_bits{8};
  BitWidth a_bits{8};
  Smoothing smoothing = Smoothing::None;
  int ranges = 1;
  double alpha = 0.0;
  double momentum = kDefaultMomentum;

  static QuantConfig cw_tw(BitWidth w_bits, BitWidth a_bits, int ranges = 1);
  static QuantConfig asq(BitWidth w_bits, BitWidth a_bits, double alpha = kAsqAlpha);
  static QuantConfig tsq(BitWidth w_bits, BitWidth a_bits, int ranges, double alpha = kTsqAlpha);

  /// Throws InvalidConfig: ASQ requires a single range, R must lie in
  /// [1, total_steps], alpha in [0, 1] and momentum in [0, 1).
  void validate(int total_steps) const;

  /// Report label, e.g. "CW+TW", "*+ASQ" or "*+TSQ+TSW".
  std::string scheme_tag(int total_steps) const;

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

struct CalibrationPrompt {
  std::string id;
  std::uint64_t seed;         // noise seed of the prompt's denoise trajectory
  std::vector<double> cond;   // conditioning vector

  friend bool operator==(const CalibrationPrompt&, const CalibrationPrompt&) = default;
};

using CalibrationSet = std::vector<CalibrationPrompt>;

/// Prompts "prompt-00", "prompt-01", ... from a synthetic dataset.
CalibrationSet make_calibration_set(const std::vector<toy::SynthSample>& samples);

/// Versioned text fixture, one line per prompt: id, seed, conditioning values.
void save_calibration_set(const CalibrationSet& set, const std::filesystem::path& path);
CalibrationSet load_calibration_set(const std::filesystem::path& path);
std::string format_calibration_set(const CalibrationSet& set);
CalibrationSet parse_calibration_set(std::string_view text);

/// Per-channel extrema of one sample's input to one linear.
struct SampleExtrema {
  std::vector<double> channel_min;
  std::vector<double> channel_max;
};

/// Splits x's rows into `samples` equal groups and reduces each to channel extrema.
std::vector<SampleExtrema> reduce_samples(const Tensor2D& x, std::size_t samples);

struct RangeStats {
  std::size_t count = 0;  // batches folded in
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::vector<double> channel_min;
  std::vector<double> channel_max;
  ChannelAbsMax absmax;
};

struct LayerSpec {
  std::string id;
  std::size_t in_channels;
};

std::vector<LayerSpec> layer_specs(const toy::ToyModel& model);

class CalibStats {
 public:
  CalibStats(TimeRangePartition partition, std::vector<LayerSpec> layers, double momentum);

  /// Folds one batch (rows split evenly into `samples`) into the accumulator
  /// of the range owning `step`. Throws UnknownLayer or StepOutOfRange.
  void observe(std::size_t layer, int step, const Tensor2D& x, std::size_t samples = 1);
  void observe(std::string_view layer_id, int step, const Tensor2D& x, std::size_t samples = 1);
  /// Same update from pre-reduced samples.
  void observe_reduced(std::size_t layer, int step, std::span<const SampleExtrema> batch);

  const RangeStats& at(std::size_t layer, std::size_t range) const;
  const TimeRangePartition& partition() const noexcept { return partition_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t layer_index(std::string_view id) const;
  double momentum() const noexcept { return momentum_; }

 private:
  TimeRangePartition partition_;
  std::vector<LayerSpec> layers_;
  double momentum_;
  std::vector<std::vector<RangeStats>> stats_;  // [layer][range]
};

/// Reduced float-run observations in call order: prompt by prompt, step by
/// step, unconditional branch before conditional, layers in execution order.
class ObservationLog {
 public:
  struct Entry {
    int step;
    std::size_t layer;
    SampleExtrema extrema;
  };

  ObservationLog(int steps, std::vector<LayerSpec> layers);

  /// Throws UnknownLayer or StepOutOfRange.
  void record(int step, std::size_t layer, SampleExtrema extrema);
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  int steps() const noexcept { return steps_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

 private:
  int steps_;
  std::vector<LayerSpec> layers_;
  std::vector<Entry> entries_;
};

/// Float denoise of every prompt with input reductions recorded. Throws
/// EmptyCalibrationSet.
ObservationLog collect_observations(const toy::ToyModel& model, const CalibrationSet& prompts,
                                    const toy::DiffusionSchedule& schedule);

/// Replays the log, in recorded order, into per-range accumulators. Each
/// entry is one forward pass, so the abs-max running average advances once
/// per forward pass of the owning range.
CalibStats accumulate(const ObservationLog& log, const TimeRangePartition& partition, double momentum);

struct ModelSignature {
  std::uint64_t config_hash = 0;
  std::string description;

  friend bool operator==(const ModelSignature&, const ModelSignature&) = default;
};

ModelSignature signature_of(const toy::ToyModel& model);

struct LayerTable {
  std::string id;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<QuantParams> activation;                     // per range, per tensor
  std::vector<QuantParams> weight;                         // per range, per output channel
  SmoothScale scales{0.0, {{1.0}}};                        // C_I x R
  std::vector<std::vector<std::uint16_t>> weight_levels;  // per range, out x in row-major

  friend bool operator==(const LayerTable&, const LayerTable&) = default;
};

/// Frozen calibration result. Every accessor is const; nothing mutates a
/// table once built.
class TimeStepTable {
 public:
  TimeStepTable(QuantConfig config, TimeRangePartition partition, ModelSignature model,
                std::vector<LayerTable> layers);

  const QuantConfig& config() const noexcept { return config_; }
  const TimeRangePartition& partition() const noexcept { return partition_; }
  const ModelSignature& model() const noexcept { return model_; }
  const std::vector<LayerTable>& layers() const noexcept { return layers_; }
  const LayerTable* find(std::string_view id) const noexcept;
  std::string scheme_tag() const { return config_.scheme_tag(partition_.total_steps()); }

  friend bool operator==(const TimeStepTable&, const TimeStepTable&) = default;

 private:
  QuantConfig config_;
  TimeRangePartition partition_;
  ModelSignature model_;
  std::vector<LayerTable> layers_;
};

/// Element-wise reciprocal used for runtime activation smoothing.
std::vector<double> reciprocal(std::span<const double> scales);

/// Builds the table for `config` from accumulated statistics. The partition
/// of `stats` must have config.ranges ranges.
TimeStepTable freeze_table(const toy::ToyModel& model, const CalibStats& stats, const QuantConfig& config);

/// collect_observations + accumulate + freeze_table. Throws
/// EmptyCalibrationSet or StepCountMismatch.
TimeStepTable run_calibration(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                              const toy::DiffusionSchedule& schedule);

/// As above with an explicit partition; its step count must match the schedule.
TimeStepTable run_calibration(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                              const toy::DiffusionSchedule& schedule, const TimeRangePartition& partition);

struct AlphaScore {
  double alpha;
  double score;
};

struct AlphaSweepResult {
  double best_alpha;
  std::vector<AlphaScore> scores;  // one entry per grid value, ascending alpha
};

/// 0.1, 0.2, ..., 1.0.
std::vector<double> alpha_grid();

/// Scores a calibrated table; higher is better.
using TableScoreFn = std::function<double(const TimeStepTable&)>;

/// Calibrates `config` at every grid alpha and returns the best-scoring one.
/// Ties go to the smaller alpha. Float statistics are collected once and
/// shared across the grid.
AlphaSweepResult alpha_sweep(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                             const toy::DiffusionSchedule& schedule, const TableScoreFn& score_fn);

AlphaSweepResult alpha_sweep(const ObservationLog& log, const toy::ToyModel& model, const QuantConfig& config,
                             const TableScoreFn& score_fn);

}  // namespace stq
