// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/engine.hpp"

#include <algorithm>

#include "stq/error.hpp"

namespace stq {

const char* to_string(ExecutorKind kind) noexcept {
  switch (kind) {
    case ExecutorKind::FloatReference: return "float";
    case ExecutorKind::StaticFakeQuant: return "static-fake";
    case ExecutorKind::StaticInteger: return "static-int";
    case ExecutorKind::DynamicBaseline: return "dynamic";
  }
  return "?";
}

bool is_static(ExecutorKind kind) noexcept {
  return kind == ExecutorKind::StaticFakeQuant || kind == ExecutorKind::StaticInteger;
}

QuantizedExecutor::QuantizedExecutor(ExecutorKind kind, const toy::ToyModel& model) : kind_(kind), model_(&model) {}

std::size_t QuantizedExecutor::range_of(int step) const {
  if (partition_) return partition_->range_of(step);
  if (step < 0) throw Error(ErrorCode::StepOutOfRange, "negative step " + std::to_string(step));
  return 0;
}

Tensor2D QuantizedExecutor::execute_linear(std::string_view layer_id, int step, const Tensor2D& x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].id == layer_id) return execute_linear(i, step, x);
  }
  throw Error(ErrorCode::UnknownLayer, "no bound layer named " + std::string(layer_id));
}

Tensor2D QuantizedExecutor::execute_linear(std::size_t layer, int step, const Tensor2D& x) const {
  if (layer >= layers_.size()) throw Error(ErrorCode::UnknownLayer, "layer index " + std::to_string(layer));
  const std::size_t r = range_of(step);
  const BoundLayer& bound = layers_[layer];
  audit::record_linear_call();

  switch (kind_) {
    case ExecutorKind::FloatReference:
      return matmul_transposed(x, model_->layer(layer).weight);
    case ExecutorKind::DynamicBaseline:
      return fake_quant_matmul(dynamic_token_quant(x, *dynamic_a_bits_), *bound.dynamic_weight);
    case ExecutorKind::StaticFakeQuant:
    case ExecutorKind::StaticInteger:
      break;
  }

  const BoundRange& br = bound.ranges[r];
  if (x.cols() != br.recip.size()) {
    throw Error(ErrorCode::ShapeError, "input to " + bound.id + " has " + std::to_string(x.cols()) + " channels");
  }
  Tensor2D xs = x;
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    auto row = xs.row(t);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] *= br.recip[i];
  }
  const QuantizedTensor xq = quantize(xs, br.activation);
  return kind_ == ExecutorKind::StaticInteger ? integer_linear(xq, br.weight) : fake_quant_matmul(xq, br.weight);
}

Tensor2D QuantizedExecutor::linear(const toy::Linear& layer, int step, const Tensor2D& x) {
  const auto index = static_cast<std::size_t>(layer.layer_index);
  if (layer.layer_index < 0 || index >= layers_.size() || layers_[index].id != layer.name) {
    throw Error(ErrorCode::UnknownLayer, "layer " + layer.name + " is not bound");
  }
  return execute_linear(index, step, x);
}

std::optional<int> QuantizedExecutor::expected_steps() const {
  if (partition_) return partition_->total_steps();
  return std::nullopt;
}

QuantizedExecutor bind(const toy::ToyModel& model, const TimeStepTable& table, ExecutorKind kind) {
  if (!is_static(kind)) throw Error(ErrorCode::InvalidConfig, std::string("cannot bind a table as ") + to_string(kind));
  if (table.model().config_hash != model.config().hash()) {
    throw Error(ErrorCode::ModelMismatch, "table was calibrated for [" + table.model().description + "], model is [" +
                                              model.config().describe() + "]");
  }
  const std::size_t ranges = table.partition().size();
  QuantizedExecutor exec(kind, model);
  exec.partition_ = table.partition();

  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const toy::LayerInfo& info = model.layers()[l];
    const LayerTable* lt = table.find(info.id);
    if (lt == nullptr) throw Error(ErrorCode::MissingLayer, "table has no entry for " + info.id);
    if (lt->in_channels != info.in_channels || lt->out_channels != info.out_channels) {
      throw Error(ErrorCode::ModelMismatch, "shape of " + info.id + " differs from the table");
    }
    if (lt->activation.size() != ranges || lt->weight.size() != ranges || lt->scales.ranges() != ranges) {
      throw Error(ErrorCode::PartitionMismatch, info.id + " does not carry one entry per range");
    }

    BoundLayer bound{info.id, {}, std::nullopt};
    const std::vector<Tensor2D> folded = fold_weights(model.layer(l).weight, lt->scales);
    for (std::size_t r = 0; r < ranges; ++r) {
      QuantizedTensor wq = quantize(folded[r], lt->weight[r]);
      if (!std::equal(wq.levels().begin(), wq.levels().end(), lt->weight_levels[r].begin(),
                      lt->weight_levels[r].end())) {
        throw Error(ErrorCode::ModelMismatch, "weights of " + info.id + " differ from the calibrated model");
      }
      bound.ranges.push_back({lt->activation[r], reciprocal(lt->scales.column(r)), std::move(wq)});
    }
    exec.layers_.push_back(std::move(bound));
  }
  if (table.layers().size() != model.layers().size()) {
    throw Error(ErrorCode::ModelMismatch, "table has layers the model does not");
  }
  return exec;
}

QuantizedExecutor bind_dynamic(const toy::ToyModel& model, BitWidth w_bits, BitWidth a_bits) {
  QuantizedExecutor exec(ExecutorKind::DynamicBaseline, model);
  exec.dynamic_a_bits_ = a_bits;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const Tensor2D& w = model.layer(l).weight;
    exec.layers_.push_back({model.layers()[l].id, {}, quantize(w, compute_params(w, w_bits, Granularity::PerChannel))});
  }
  return exec;
}

QuantizedExecutor bind_float(const toy::ToyModel& model) {
  QuantizedExecutor exec(ExecutorKind::FloatReference, model);
  for (const toy::LayerInfo& info : model.layers()) exec.layers_.push_back({info.id, {}, std::nullopt});
  return exec;
}

AuditReport static_op_count_audit(const QuantizedExecutor& executor, const audit::StatisticAudit& trace) {
  const std::uint64_t ops = trace.statistics();
  const std::uint64_t calls = trace.linear_calls();
  const bool conforms = executor.kind() == ExecutorKind::DynamicBaseline ? ops == calls && calls > 0 : ops == 0;
  return {executor.kind(), ops, calls, conforms};
}

toy::LatentVideo audited_denoise(const toy::ToyModel& model, const toy::DiffusionSchedule& schedule,
                                 std::span<const double> cond, std::uint64_t seed, QuantizedExecutor& executor,
                                 audit::StatisticAudit& trace) {
  const audit::ScopedAudit scope(trace);
  return toy::denoise(model, schedule, cond, seed, executor);
}

}  // namespace stq
