// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/calibration.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stq/error.hpp"

namespace stq {
namespace {

constexpr std::string_view kCalibrationFormat = "stq.calibration-set/1";

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view token, std::size_t line) {
  T value{};
  const auto res = std::from_chars(token.data(), token.data() + token.size(), value);
  if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
    throw Error(ErrorCode::FormatError, "line " + std::to_string(line) + ": bad number '" + std::string(token) + "'");
  }
  return value;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

SampleExtrema reduce_rows(const Tensor2D& x, std::size_t begin, std::size_t end) {
  SampleExtrema e{std::vector<double>(x.row(begin).begin(), x.row(begin).end()),
                  std::vector<double>(x.row(begin).begin(), x.row(begin).end())};
  for (std::size_t r = begin + 1; r < end; ++r) {
    const auto row = x.row(r);
    for (std::size_t i = 0; i < row.size(); ++i) {
      e.channel_min[i] = std::min(e.channel_min[i], row[i]);
      e.channel_max[i] = std::max(e.channel_max[i], row[i]);
    }
  }
  return e;
}

void check_layer(std::size_t layer, std::size_t count) {
  if (layer >= count) throw Error(ErrorCode::UnknownLayer, "layer index " + std::to_string(layer));
}

void check_step(int step, int steps) {
  if (step < 0 || step >= steps) {
    throw Error(ErrorCode::StepOutOfRange, "step " + std::to_string(step) + " outside [0, " + std::to_string(steps) + ")");
  }
}

// Feeds the float matmul through while recording each input's extrema.
class RecordingExecutor final : public toy::LinearExecutor {
 public:
  explicit RecordingExecutor(ObservationLog& log) : log_(log) {}

  Tensor2D linear(const toy::Linear& layer, int step, const Tensor2D& x) override {
    log_.record(step, static_cast<std::size_t>(layer.layer_index), reduce_rows(x, 0, x.rows()));
    return matmul_transposed(x, layer.weight);
  }

 private:
  ObservationLog& log_;
};

}  // namespace

TimeRangePartition::TimeRangePartition(int total_steps, std::vector<StepRange> ranges)
    : total_steps_(total_steps), ranges_(std::move(ranges)) {
  if (total_steps_ < 1 || ranges_.empty()) throw Error(ErrorCode::InvalidPartition, "empty partition");
  int next = 0;
  for (std::size_t r = 0; r < ranges_.size(); ++r) {
    const StepRange& range = ranges_[r];
    if (range.begin != next || range.end <= range.begin) {
      throw Error(ErrorCode::InvalidPartition, "range " + std::to_string(r) + " is empty or not contiguous");
    }
    owner_.insert(owner_.end(), static_cast<std::size_t>(range.size()), r);
    next = range.end;
  }
  if (next != total_steps_) throw Error(ErrorCode::InvalidPartition, "ranges do not cover every step");
}

std::size_t TimeRangePartition::range_of(int step) const {
  check_step(step, total_steps_);
  return owner_[static_cast<std::size_t>(step)];
}

TimeRangePartition partition_steps(int total_steps, int ranges) {
  if (total_steps < 1 || ranges < 1 || ranges > total_steps) {
    throw Error(ErrorCode::InvalidPartition, "cannot split " + std::to_string(total_steps) + " steps into " +
                                                 std::to_string(ranges) + " ranges");
  }
  const int base = total_steps / ranges;
  const int extra = total_steps % ranges;
  std::vector<StepRange> out;
  int begin = 0;
  for (int r = 0; r < ranges; ++r) {
    const int size = base + (r < extra ? 1 : 0);
    out.push_back({begin, begin + size});
    begin += size;
  }
  return TimeRangePartition(total_steps, std::move(out));
}

const char* to_string(Smoothing smoothing) noexcept {
  switch (smoothing) {
    case Smoothing::None: return "none";
    case Smoothing::ASQ: return "asq";
    case Smoothing::TSQ: return "tsq";
  }
  return "?";
}

QuantConfig QuantConfig::cw_tw(BitWidth w_bits, BitWidth a_bits, int ranges) {
  return QuantConfig{w_bits, a_bits, Smoothing::None, ranges, 0.0, kDefaultMomentum};
}

QuantConfig QuantConfig::asq(BitWidth w_bits, BitWidth a_bits, double alpha) {
  return QuantConfig{w_bits, a_bits, Smoothing::ASQ, 1, alpha, kDefaultMomentum};
}

QuantConfig QuantConfig::tsq(BitWidth w_bits, BitWidth a_bits, int ranges, double alpha) {
  return QuantConfig{w_bits, a_bits, Smoothing::TSQ, ranges, alpha, kDefaultMomentum};
}

void QuantConfig::validate(int total_steps) const {
  if (smoothing == Smoothing::ASQ && ranges != 1) {
    throw Error(ErrorCode::InvalidConfig, "ASQ uses a single time range, got " + std::to_string(ranges));
  }
  if (ranges < 1 || ranges > total_steps) {
    throw Error(ErrorCode::InvalidConfig, "time ranges " + std::to_string(ranges) + " outside [1, " +
                                              std::to_string(total_steps) + "]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidConfig, "alpha must lie in [0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::InvalidConfig, "momentum must lie in [0, 1)");
}

std::string QuantConfig::scheme_tag(int total_steps) const {
  const std::string tr = "*+" + std::to_string(ranges) + "TR";
  switch (smoothing) {
    case Smoothing::None:
      if (ranges == 1) return "CW+TW";
      return ranges == total_steps ? "*+TSW" : tr;
    case Smoothing::ASQ:
      return "*+ASQ";
    case Smoothing::TSQ:
      return ranges == total_steps ? "*+TSQ+TSW" : "*+TSQ+" + std::to_string(ranges) + "TR";
  }
  return "?";
}

CalibrationSet make_calibration_set(const std::vector<toy::SynthSample>& samples) {
  CalibrationSet set;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::string id = std::to_string(i);
    if (id.size() < 2) id.insert(0, 2 - id.size(), '0');
    set.push_back({"prompt-" + id, samples[i].seed, samples[i].cond});
  }
  return set;
}

std::string format_calibration_set(const CalibrationSet& set) {
  std::ostringstream os;
  os << "format " << kCalibrationFormat << "\n";
  os << "prompts " << set.size() << "\n";
  for (const CalibrationPrompt& p : set) {
    os << p.id << ' ' << p.seed;
    for (double v : p.cond) os << ' ' << format_double(v);
    os << "\n";
  }
  return os.str();
}

CalibrationSet parse_calibration_set(std::string_view text) {
  CalibrationSet set;
  std::size_t expected = 0;
  bool have_format = false, have_count = false;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    const std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const auto tokens = split_ws(line);
    if (tokens.empty() || tokens.front().starts_with('#')) continue;
    if (!have_format) {
      if (tokens.size() != 2 || tokens[0] != "format" || tokens[1] != kCalibrationFormat) {
        throw Error(ErrorCode::FormatError, "missing or unsupported calibration set format line");
      }
      have_format = true;
    } else if (!have_count) {
      if (tokens.size() != 2 || tokens[0] != "prompts") throw Error(ErrorCode::FormatError, "missing prompt count");
      expected = parse_number<std::size_t>(tokens[1], line_no);
      have_count = true;
    } else {
      if (tokens.size() < 3) throw Error(ErrorCode::FormatError, "line " + std::to_string(line_no) + ": short record");
      CalibrationPrompt p{std::string(tokens[0]), parse_number<std::uint64_t>(tokens[1], line_no), {}};
      for (std::size_t i = 2; i < tokens.size(); ++i) p.cond.push_back(parse_number<double>(tokens[i], line_no));
      if (!set.empty() && set.front().cond.size() != p.cond.size()) {
        throw Error(ErrorCode::FormatError, "line " + std::to_string(line_no) + ": conditioning length differs");
      }
      set.push_back(std::move(p));
    }
  }
  if (!have_count) throw Error(ErrorCode::FormatError, "truncated calibration set");
  if (set.size() != expected) {
    throw Error(ErrorCode::FormatError, "expected " + std::to_string(expected) + " prompts, found " +
                                            std::to_string(set.size()));
  }
  return set;
}

void save_calibration_set(const CalibrationSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << format_calibration_set(set);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

CalibrationSet load_calibration_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_calibration_set(ss.str());
}

std::vector<SampleExtrema> reduce_samples(const Tensor2D& x, std::size_t samples) {
  if (samples == 0 || x.rows() % samples != 0) {
    throw Error(ErrorCode::ShapeError, "batch of " + std::to_string(x.rows()) + " rows cannot be split into " +
                                           std::to_string(samples) + " samples");
  }
  const std::size_t per = x.rows() / samples;
  std::vector<SampleExtrema> out;
  out.reserve(samples);
  for (std::size_t s = 0; s < samples; ++s) out.push_back(reduce_rows(x, s * per, (s + 1) * per));
  return out;
}

std::vector<LayerSpec> layer_specs(const toy::ToyModel& model) {
  std::vector<LayerSpec> out;
  for (const toy::LayerInfo& info : model.layers()) out.push_back({info.id, info.in_channels});
  return out;
}

CalibStats::CalibStats(TimeRangePartition partition, std::vector<LayerSpec> layers, double momentum)
    : partition_(std::move(partition)), layers_(std::move(layers)), momentum_(momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorCode::InvalidConfig, "momentum must lie in [0, 1)");
  stats_.assign(layers_.size(), std::vector<RangeStats>(partition_.size()));
}

std::size_t CalibStats::layer_index(std::string_view id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].id == id) return i;
  }
  throw Error(ErrorCode::UnknownLayer, "no layer named " + std::string(id));
}

void CalibStats::observe(std::size_t layer, int step, const Tensor2D& x, std::size_t samples) {
  check_layer(layer, layers_.size());
  check_step(step, partition_.total_steps());
  const std::vector<SampleExtrema> batch = reduce_samples(x, samples);
  observe_reduced(layer, step, batch);
}

void CalibStats::observe(std::string_view layer_id, int step, const Tensor2D& x, std::size_t samples) {
  observe(layer_index(layer_id), step, x, samples);
}

void CalibStats::observe_reduced(std::size_t layer, int step, std::span<const SampleExtrema> batch) {
  check_layer(layer, layers_.size());
  RangeStats& st = stats_[layer][partition_.range_of(step)];
  const std::size_t channels = layers_[layer].in_channels;
  if (batch.empty()) throw Error(ErrorCode::InvalidInput, "empty observation batch");
  for (const SampleExtrema& e : batch) {
    if (e.channel_min.size() != channels || e.channel_max.size() != channels) {
      throw Error(ErrorCode::ShapeError, "observation for " + layers_[layer].id + " has wrong channel count");
    }
  }
  if (st.count == 0) {
    st.channel_min = batch.front().channel_min;
    st.channel_max = batch.front().channel_max;
  }
  // Mean over samples of each sample's channel abs-max.
  std::vector<double> absmax(channels, 0.0);
  for (const SampleExtrema& e : batch) {
    for (std::size_t i = 0; i < channels; ++i) {
      st.channel_min[i] = std::min(st.channel_min[i], e.channel_min[i]);
      st.channel_max[i] = std::max(st.channel_max[i], e.channel_max[i]);
      absmax[i] += std::max(std::abs(e.channel_min[i]), std::abs(e.channel_max[i]));
    }
  }
  for (double& a : absmax) a /= static_cast<double>(batch.size());
  apply_running_absmax(st.absmax, absmax, momentum_);
  st.min = *std::min_element(st.channel_min.begin(), st.channel_min.end());
  st.max = *std::max_element(st.channel_max.begin(), st.channel_max.end());
  ++st.count;
}

const RangeStats& CalibStats::at(std::size_t layer, std::size_t range) const {
  check_layer(layer, layers_.size());
  if (range >= partition_.size()) throw Error(ErrorCode::InvalidInput, "range index " + std::to_string(range));
  return stats_[layer][range];
}

ObservationLog::ObservationLog(int steps, std::vector<LayerSpec> layers) : steps_(steps), layers_(std::move(layers)) {}

void ObservationLog::record(int step, std::size_t layer, SampleExtrema extrema) {
  check_layer(layer, layers_.size());
  check_step(step, steps_);
  entries_.push_back({step, layer, std::move(extrema)});
}

ObservationLog collect_observations(const toy::ToyModel& model, const CalibrationSet& prompts,
                                    const toy::DiffusionSchedule& schedule) {
  if (prompts.empty()) throw Error(ErrorCode::EmptyCalibrationSet, "calibration set has no prompts");
  ObservationLog log(schedule.steps, layer_specs(model));
  RecordingExecutor recorder(log);
  for (const CalibrationPrompt& p : prompts) toy::denoise(model, schedule, p.cond, p.seed, recorder);
  return log;
}

CalibStats accumulate(const ObservationLog& log, const TimeRangePartition& partition, double momentum) {
  if (partition.total_steps() != log.steps()) {
    throw Error(ErrorCode::StepCountMismatch, "partition covers " + std::to_string(partition.total_steps()) +
                                                  " steps, observations have " + std::to_string(log.steps()));
  }
  CalibStats stats(partition, log.layers(), momentum);
  for (const ObservationLog::Entry& e : log.entries()) {
    stats.observe_reduced(e.layer, e.step, std::span<const SampleExtrema>(&e.extrema, 1));
  }
  return stats;
}

ModelSignature signature_of(const toy::ToyModel& model) {
  return {model.config().hash(), model.config().describe()};
}

TimeStepTable::TimeStepTable(QuantConfig config, TimeRangePartition partition, ModelSignature model,
                             std::vector<LayerTable> layers)
    : config_(std::move(config)), partition_(std::move(partition)), model_(std::move(model)), layers_(std::move(layers)) {
  const std::size_t ranges = partition_.size();
  if (static_cast<std::size_t>(config_.ranges) != ranges) {
    throw Error(ErrorCode::PartitionMismatch, "config has " + std::to_string(config_.ranges) + " ranges, partition " +
                                                  std::to_string(ranges));
  }
  config_.validate(partition_.total_steps());
  if (layers_.empty()) throw Error(ErrorCode::InvalidInput, "table has no layers");
  for (const LayerTable& l : layers_) {
    const std::string where = "layer " + l.id + ": ";
    if (l.in_channels == 0 || l.out_channels == 0) throw Error(ErrorCode::InvalidInput, where + "empty shape");
    if (l.activation.size() != ranges || l.weight.size() != ranges || l.weight_levels.size() != ranges ||
        l.scales.ranges() != ranges) {
      throw Error(ErrorCode::PartitionMismatch, where + "range count differs from partition");
    }
    if (l.scales.channels() != l.in_channels) throw Error(ErrorCode::ShapeError, where + "scale length");
    for (std::size_t r = 0; r < ranges; ++r) {
      const QuantParams& a = l.activation[r];
      const QuantParams& w = l.weight[r];
      a.validate();
      w.validate();
      if (a.granularity != Granularity::PerTensor || a.bits != config_.a_bits) {
        throw Error(ErrorCode::InvalidInput, where + "activation parameters must be per-tensor at a_bits");
      }
      if (w.granularity != Granularity::PerChannel || w.size() != l.out_channels || w.bits != config_.w_bits) {
        throw Error(ErrorCode::InvalidInput, where + "weight parameters must be per-channel at w_bits");
      }
      // Validates the payload's level bound and shape.
      QuantizedTensor(l.out_channels, l.in_channels, l.weight_levels[r], w);
    }
  }
}

const LayerTable* TimeStepTable::find(std::string_view id) const noexcept {
  for (const LayerTable& l : layers_) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

std::vector<double> reciprocal(std::span<const double> scales) {
  std::vector<double> out(scales.size());
  for (std::size_t i = 0; i < scales.size(); ++i) out[i] = 1.0 / scales[i];
  return out;
}

TimeStepTable freeze_table(const toy::ToyModel& model, const CalibStats& stats, const QuantConfig& config) {
  const TimeRangePartition& partition = stats.partition();
  config.validate(partition.total_steps());
  if (static_cast<std::size_t>(config.ranges) != partition.size()) {
    throw Error(ErrorCode::PartitionMismatch, "statistics were accumulated for " + std::to_string(partition.size()) +
                                                  " ranges, config asks for " + std::to_string(config.ranges));
  }
  const auto& infos = model.layers();
  if (stats.layers().size() != infos.size()) throw Error(ErrorCode::ModelMismatch, "layer count differs from model");

  std::vector<LayerTable> layers;
  layers.reserve(infos.size());
  for (std::size_t l = 0; l < infos.size(); ++l) {
    const toy::LayerInfo& info = infos[l];
    if (stats.layers()[l].id != info.id || stats.layers()[l].in_channels != info.in_channels) {
      throw Error(ErrorCode::ModelMismatch, "statistics layer " + stats.layers()[l].id + " does not match " + info.id);
    }
    const Tensor2D& w = model.layer(l).weight;
    const std::vector<double> w_absmax =
        config.smoothing == Smoothing::None ? std::vector<double>{} : weight_absmax(w);

    LayerTable table;
    table.id = info.id;
    table.in_channels = info.in_channels;
    table.out_channels = info.out_channels;
    std::vector<std::vector<double>> columns;
    for (std::size_t r = 0; r < partition.size(); ++r) {
      const RangeStats& st = stats.at(l, r);
      if (st.count == 0) {
        throw Error(ErrorCode::EmptyCalibrationSet, "no observations for " + info.id + " in range " + std::to_string(r));
      }
      std::vector<double> s(info.in_channels, 1.0);
      if (config.smoothing != Smoothing::None) {
        ChannelAbsMax a = st.absmax;
        a.w_absmax = w_absmax;
        s = compute_scales(a, config.alpha);
      }
      const std::vector<double> recip = reciprocal(s);

      // Scaling by a positive constant is monotone, so the extrema of the
      // smoothed tensor follow from the per-channel extrema.
      double lo = st.channel_min[0] * recip[0];
      double hi = st.channel_max[0] * recip[0];
      for (std::size_t i = 1; i < recip.size(); ++i) {
        lo = std::min(lo, st.channel_min[i] * recip[i]);
        hi = std::max(hi, st.channel_max[i] * recip[i]);
      }
      table.activation.push_back(tensor_params_from_extrema(lo, hi, config.a_bits));

      Tensor2D folded = w;
      for (std::size_t o = 0; o < folded.rows(); ++o) {
        auto row = folded.row(o);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] *= s[i];
      }
      QuantParams wp = compute_params(folded, config.w_bits, Granularity::PerChannel);
      const QuantizedTensor wq = quantize(folded, wp);
      table.weight_levels.emplace_back(wq.levels().begin(), wq.levels().end());
      table.weight.push_back(std::move(wp));
      columns.push_back(std::move(s));
    }
    table.scales = SmoothScale(config.smoothing == Smoothing::None ? 0.0 : config.alpha, std::move(columns));
    layers.push_back(std::move(table));
  }
  return TimeStepTable(config, partition, signature_of(model), std::move(layers));
}

TimeStepTable run_calibration(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                              const toy::DiffusionSchedule& schedule) {
  config.validate(schedule.steps);
  return run_calibration(model, prompts, config, schedule, partition_steps(schedule.steps, config.ranges));
}

TimeStepTable run_calibration(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                              const toy::DiffusionSchedule& schedule, const TimeRangePartition& partition) {
  if (prompts.empty()) throw Error(ErrorCode::EmptyCalibrationSet, "calibration set has no prompts");
  if (partition.total_steps() != schedule.steps) {
    throw Error(ErrorCode::StepCountMismatch, "partition covers " + std::to_string(partition.total_steps()) +
                                                  " steps, schedule runs " + std::to_string(schedule.steps));
  }
  const ObservationLog log = collect_observations(model, prompts, schedule);
  return freeze_table(model, accumulate(log, partition, config.momentum), config);
}

std::vector<double> alpha_grid() {
  std::vector<double> grid;
  for (int k = 1; k <= 10; ++k) grid.push_back(k / 10.0);
  return grid;
}

AlphaSweepResult alpha_sweep(const ObservationLog& log, const toy::ToyModel& model, const QuantConfig& config,
                             const TableScoreFn& score_fn) {
  config.validate(log.steps());
  const CalibStats stats = accumulate(log, partition_steps(log.steps(), config.ranges), config.momentum);
  AlphaSweepResult result{0.0, {}};
  double best = 0.0;
  for (double alpha : alpha_grid()) {
    QuantConfig c = config;
    c.alpha = alpha;
    const double score = score_fn(freeze_table(model, stats, c));
    result.scores.push_back({alpha, score});
    // Strict comparison keeps the smaller alpha on ties.
    if (result.scores.size() == 1 || score > best) {
      best = score;
      result.best_alpha = alpha;
    }
  }
  return result;
}

AlphaSweepResult alpha_sweep(const toy::ToyModel& model, const CalibrationSet& prompts, const QuantConfig& config,
                             const toy::DiffusionSchedule& schedule, const TableScoreFn& score_fn) {
  config.validate(schedule.steps);
  return alpha_sweep(collect_observations(model, prompts, schedule), model, config, score_fn);
}

}  // namespace stq
