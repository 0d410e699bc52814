// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Table-driven inference.
 *
 * bind() does every data-independent piece of work up front: weights are
 * folded with each range's smoothing scales and quantized once, and the
 * activation reciprocals 1/s are precomputed. A bound executor is immutable;
 * at inference a linear call looks up its range from the step alone,
 * multiplies x by the reciprocals, quantizes it with the frozen per-tensor
 * parameters and runs the quantized matmul. The dynamic baseline instead
 * fits per-token parameters to every input it sees.
 */

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stq/audit.hpp"
#include "stq/calibration.hpp"
#include "stq/quant_core.hpp"
#include "stq/toy_model.hpp"

namespace stq {

enum class ExecutorKind : std::uint8_t { FloatReference, StaticFakeQuant, StaticInteger, DynamicBaseline };

const char* to_string(ExecutorKind kind) noexcept;
bool is_static(ExecutorKind kind) noexcept;

struct BoundRange {
  QuantParams activation;     // per tensor
  std::vector<double> recip;  // 1 / s per input channel
  QuantizedTensor weight;     // folded and quantized, out x in
};

struct BoundLayer {
  std::string id;
  std::vector<BoundRange> ranges;  // empty for FloatReference
  std::optional<QuantizedTensor> dynamic_weight;  // DynamicBaseline only, channel-wise
};

class QuantizedExecutor final : public toy::LinearExecutor {
 public:
  ExecutorKind kind() const noexcept { return kind_; }
  const std::vector<BoundLayer>& layers() const noexcept { return layers_; }
  const std::optional<TimeRangePartition>& partition() const noexcept { return partition_; }

  /// Range used at `step`; 0 for executors without a table. Throws
  /// StepOutOfRange for static kinds.
  std::size_t range_of(int step) const;

  /// Throws UnknownLayer or StepOutOfRange.
  Tensor2D execute_linear(std::string_view layer_id, int step, const Tensor2D& x) const;
  Tensor2D execute_linear(std::size_t layer, int step, const Tensor2D& x) const;

  Tensor2D linear(const toy::Linear& layer, int step, const Tensor2D& x) override;
  std::optional<int> expected_steps() const override;

 private:
  friend QuantizedExecutor bind(const toy::ToyModel&, const TimeStepTable&, ExecutorKind);
  friend QuantizedExecutor bind_dynamic(const toy::ToyModel&, BitWidth, BitWidth);
  friend QuantizedExecutor bind_float(const toy::ToyModel&);

  QuantizedExecutor(ExecutorKind kind, const toy::ToyModel& model);

  ExecutorKind kind_;
  const toy::ToyModel* model_;
  std::vector<BoundLayer> layers_;
  std::optional<TimeRangePartition> partition_;
  std::optional<BitWidth> dynamic_a_bits_;
};

/// Binds a frozen table to the model for StaticFakeQuant or StaticInteger.
/// Throws ModelMismatch, MissingLayer, PartitionMismatch or InvalidConfig.
QuantizedExecutor bind(const toy::ToyModel& model, const TimeStepTable& table, ExecutorKind kind);

/// Channel-wise weights quantized now; per-token activations at inference.
QuantizedExecutor bind_dynamic(const toy::ToyModel& model, BitWidth w_bits, BitWidth a_bits);

QuantizedExecutor bind_float(const toy::ToyModel& model);

struct AuditReport {
  ExecutorKind kind;
  std::uint64_t statistic_ops;  // runtime min/max/abs-max evaluations
  std::uint64_t linear_calls;
  /// Static and float kinds: no statistic ops. Dynamic: one per linear call.
  bool conforms;
};

AuditReport static_op_count_audit(const QuantizedExecutor& executor, const audit::StatisticAudit& trace);

/// denoise() with `trace` installed on this thread for the duration.
toy::LatentVideo audited_denoise(const toy::ToyModel& model, const toy::DiffusionSchedule& schedule,
                                 std::span<const double> cond, std::uint64_t seed, QuantizedExecutor& executor,
                                 audit::StatisticAudit& trace);

}  // namespace stq
