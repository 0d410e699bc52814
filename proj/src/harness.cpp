// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>

#include "stq/audit.hpp"
#include "stq/error.hpp"
#include "stq/table_file.hpp"

namespace stq::harness {
namespace {

using Json = nlohmann::ordered_json;

double clamp_db(double db) { return std::clamp(db, -kDbCap, kDbCap); }

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%016" PRIx64, v);
  return buf;
}

std::string bits_label(const RunRow& r) {
  if (r.w_bits == 0) return "-";
  return std::to_string(r.w_bits) + "/" + std::to_string(r.a_bits);
}

Json metrics_json(const Metrics& m) {
  return Json{{"mse", m.mse}, {"cosine", m.cosine}, {"psnr_db", m.psnr_db}};
}

std::string line(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

}  // namespace

double snr_db(double signal_energy, double noise_energy) {
  if (noise_energy == 0.0) return kDbCap;
  if (signal_energy == 0.0) return -kDbCap;
  return clamp_db(10.0 * std::log10(signal_energy / noise_energy));
}

Metrics compare_outputs(const Tensor2D& reference, const Tensor2D& output) {
  if (reference.rows() != output.rows() || reference.cols() != output.cols()) {
    throw Error(ErrorCode::ShapeError, "output shape differs from the reference");
  }
  const auto r = reference.values();
  const auto o = output.values();
  double se = 0.0, dot = 0.0, rr = 0.0, oo = 0.0, peak = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double d = o[i] - r[i];
    se += d * d;
    dot += r[i] * o[i];
    rr += r[i] * r[i];
    oo += o[i] * o[i];
    peak = std::max(peak, std::abs(r[i]));
  }
  Metrics m;
  m.mse = se / static_cast<double>(r.size());
  if (rr == 0.0 && oo == 0.0) {
    m.cosine = 1.0;
  } else if (rr == 0.0 || oo == 0.0) {
    m.cosine = 0.0;
  } else {
    m.cosine = std::clamp(dot / std::sqrt(rr * oo), -1.0, 1.0);
  }
  m.psnr_db = m.mse == 0.0 ? kDbCap : snr_db(peak * peak, m.mse);
  return m;
}

Metrics mean_metrics(std::span<const Metrics> metrics) {
  if (metrics.empty()) throw Error(ErrorCode::InvalidInput, "no metrics to average");
  Metrics out{0.0, 0.0, 0.0};
  for (const Metrics& m : metrics) {
    out.mse += m.mse;
    out.cosine += m.cosine;
    out.psnr_db += m.psnr_db;
  }
  const double n = static_cast<double>(metrics.size());
  out.mse /= n;
  out.cosine /= n;
  out.psnr_db /= n;
  return out;
}

SnrProbe::SnrProbe(toy::LinearExecutor& inner, std::size_t layers, int steps)
    : inner_(inner), steps_(steps), signal_(layers * static_cast<std::size_t>(steps), 0.0), noise_(signal_) {}

Tensor2D SnrProbe::linear(const toy::Linear& layer, int step, const Tensor2D& x) {
  Tensor2D y = inner_.linear(layer, step, x);
  const Tensor2D ref = matmul_transposed(x, layer.weight);
  const std::size_t cell = static_cast<std::size_t>(layer.layer_index) * static_cast<std::size_t>(steps_) +
                           static_cast<std::size_t>(step);
  if (layer.layer_index < 0 || step < 0 || step >= steps_ || cell >= signal_.size()) {
    throw Error(ErrorCode::StepOutOfRange, "probe cannot place " + layer.name + " at step " + std::to_string(step));
  }
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = y.values()[i] - ref.values()[i];
    signal_[cell] += ref.values()[i] * ref.values()[i];
    noise_[cell] += d * d;
  }
  return y;
}

std::vector<std::vector<double>> SnrProbe::snr_db() const {
  const std::size_t layers = signal_.size() / static_cast<std::size_t>(steps_);
  std::vector<std::vector<double>> out(layers, std::vector<double>(static_cast<std::size_t>(steps_)));
  for (std::size_t l = 0; l < layers; ++l) {
    for (int s = 0; s < steps_; ++s) {
      const std::size_t cell = l * static_cast<std::size_t>(steps_) + static_cast<std::size_t>(s);
      out[l][static_cast<std::size_t>(s)] = harness::snr_db(signal_[cell], noise_[cell]);
    }
  }
  return out;
}

Evaluator::Evaluator(const toy::ToyModel& model, toy::DiffusionSchedule schedule, CalibrationSet prompts,
                     std::uint64_t eval_seed)
    : model_(&model), schedule_(std::move(schedule)), prompts_(std::move(prompts)), eval_seed_(eval_seed) {
  if (prompts_.empty()) throw Error(ErrorCode::InvalidInput, "evaluation set has no prompts");
  toy::FloatExecutor fe;
  for (const CalibrationPrompt& p : prompts_) references_.push_back(toy::denoise(model, schedule_, p.cond, p.seed, fe).data);
}

RunRow Evaluator::run(std::string scheme, QuantizedExecutor& executor, bool probe_snr) const {
  RunRow row;
  row.scheme = std::move(scheme);
  row.executor = executor.kind();
  audit::StatisticAudit trace;
  std::optional<SnrProbe> probe;
  if (probe_snr) probe.emplace(executor, model_->layers().size(), schedule_.steps);
  std::vector<Metrics> per_prompt;
  {
    const audit::ScopedAudit scope(trace);
    for (std::size_t i = 0; i < prompts_.size(); ++i) {
      toy::LinearExecutor& exec = probe ? static_cast<toy::LinearExecutor&>(*probe) : executor;
      const toy::LatentVideo out = toy::denoise(*model_, schedule_, prompts_[i].cond, prompts_[i].seed, exec);
      per_prompt.push_back(compare_outputs(references_[i], out.data));
    }
  }
  row.metrics = mean_metrics(per_prompt);
  row.runtime_statistic_ops = trace.statistics();
  row.linear_calls = trace.linear_calls();
  if (probe) row.layer_step_snr_db = probe->snr_db();
  return row;
}

double Evaluator::mean_cosine(QuantizedExecutor& executor) const {
  double sum = 0.0;
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    const toy::LatentVideo out = toy::denoise(*model_, schedule_, prompts_[i].cond, prompts_[i].seed, executor);
    sum += compare_outputs(references_[i], out.data).cosine;
  }
  return sum / static_cast<double>(prompts_.size());
}

FidelityReport Evaluator::report(std::string command) const {
  FidelityReport r;
  r.command = std::move(command);
  r.model = signature_of(*model_);
  for (const toy::LayerInfo& info : model_->layers()) r.layer_ids.push_back(info.id);
  r.steps = schedule_.steps;
  r.cfg_scale = schedule_.cfg_scale;
  r.eval_prompts = prompts_.size();
  r.eval_seed = eval_seed_;
  return r;
}

SchemeKind parse_scheme(std::string_view name) {
  if (name == "cw-tw") return SchemeKind::CwTw;
  if (name == "asq") return SchemeKind::Asq;
  if (name == "tsq-tsw") return SchemeKind::TsqTsw;
  throw Error(ErrorCode::InvalidConfig, "unknown scheme '" + std::string(name) + "'");
}

const char* to_string(SchemeKind kind) noexcept {
  switch (kind) {
    case SchemeKind::CwTw: return "cw-tw";
    case SchemeKind::Asq: return "asq";
    case SchemeKind::TsqTsw: return "tsq-tsw";
  }
  return "?";
}

QuantConfig make_config(SchemeKind kind, BitWidth w_bits, BitWidth a_bits, std::optional<int> ranges,
                        std::optional<double> alpha, int total_steps) {
  QuantConfig c;
  switch (kind) {
    case SchemeKind::CwTw:
      c = QuantConfig::cw_tw(w_bits, a_bits, ranges.value_or(1));
      if (alpha) c.alpha = *alpha;
      break;
    case SchemeKind::Asq:
      c = QuantConfig::asq(w_bits, a_bits, alpha.value_or(kAsqAlpha));
      if (ranges) c.ranges = *ranges;
      break;
    case SchemeKind::TsqTsw:
      c = QuantConfig::tsq(w_bits, a_bits, ranges.value_or(total_steps), alpha.value_or(kTsqAlpha));
      break;
  }
  c.validate(total_steps);
  return c;
}

RunRow run_table(const Evaluator& eval, const TimeStepTable& table, bool probe_snr) {
  QuantizedExecutor exec = bind(eval.model(), table, ExecutorKind::StaticFakeQuant);
  RunRow row = eval.run(table.scheme_tag(), exec, probe_snr);
  row.w_bits = table.config().w_bits.bits();
  row.a_bits = table.config().a_bits.bits();
  row.ranges = table.config().ranges;
  row.alpha = table.config().alpha;
  row.table_bytes = encode_table(table).size();
  return row;
}

std::vector<std::pair<int, int>> default_bit_grid() {
  return {{4, 4}, {4, 6}, {6, 6}, {4, 8}, {6, 8}, {8, 8}, {4, 16}, {6, 16}, {8, 16}};
}

std::vector<int> default_range_list() { return {1, 2, 4, 10, 20}; }

std::vector<SchemeAverage> scheme_averages(const std::vector<RunRow>& rows) {
  std::vector<SchemeAverage> out;
  std::vector<std::vector<Metrics>> groups;
  for (const RunRow& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SchemeAverage& a) { return a.scheme == r.scheme; });
    if (it == out.end()) {
      out.push_back({r.scheme, 0, {}});
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(r.metrics);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].rows = groups[i].size();
    out[i].metrics = mean_metrics(groups[i]);
  }
  return out;
}

FidelityReport bitsweep(const ObservationLog& log, const Evaluator& eval, const std::vector<SweepScheme>& schemes,
                        const std::vector<std::pair<int, int>>& bits, double momentum) {
  FidelityReport report = eval.report("bitsweep");
  const int t = eval.schedule().steps;
  for (const SweepScheme& s : schemes) {
    // The statistics depend only on the partition, so one accumulation per
    // scheme serves the whole bit grid.
    const QuantConfig probe = make_config(s.kind, BitWidth(8), BitWidth(8), s.ranges, s.alpha, t);
    const CalibStats stats = accumulate(log, partition_steps(t, probe.ranges), momentum);
    for (const auto& [w, a] : bits) {
      QuantConfig c = make_config(s.kind, BitWidth(w), BitWidth(a), s.ranges, s.alpha, t);
      c.momentum = momentum;
      report.rows.push_back(run_table(eval, freeze_table(eval.model(), stats, c), false));
    }
  }
  report.averages = scheme_averages(report.rows);
  return report;
}

FidelityReport trsweep(const ObservationLog& log, const Evaluator& eval, SchemeKind kind, BitWidth w_bits,
                       BitWidth a_bits, const std::vector<int>& ranges, std::optional<double> alpha, double momentum) {
  FidelityReport report = eval.report("trsweep");
  const int t = eval.schedule().steps;
  for (int r : ranges) {
    QuantConfig c = make_config(kind, w_bits, a_bits, r, alpha, t);
    c.momentum = momentum;
    const CalibStats stats = accumulate(log, partition_steps(t, r), momentum);
    report.rows.push_back(run_table(eval, freeze_table(eval.model(), stats, c), false));
  }
  return report;
}

FidelityReport alpha_sweep_report(const ObservationLog& log, const Evaluator& eval, const QuantConfig& config) {
  FidelityReport report = eval.report("alpha-sweep");
  const AlphaSweepResult result = alpha_sweep(log, eval.model(), config, [&](const TimeStepTable& table) {
    RunRow row = run_table(eval, table, false);
    const double score = row.metrics.cosine;
    report.rows.push_back(std::move(row));
    return score;
  });
  QuantConfig best = config;
  best.alpha = result.best_alpha;
  report.alpha = AlphaSection{best.scheme_tag(eval.schedule().steps), result.best_alpha, result.scores};
  return report;
}

std::string to_json(const FidelityReport& report) {
  Json rows = Json::array();
  for (const RunRow& r : report.rows) {
    Json row{{"scheme", r.scheme},
             {"executor", to_string(r.executor)},
             {"w_bits", r.w_bits},
             {"a_bits", r.a_bits},
             {"ranges", r.ranges},
             {"alpha", r.alpha}};
    row["metrics"] = metrics_json(r.metrics);
    row["runtime_statistic_ops"] = r.runtime_statistic_ops;
    row["linear_calls"] = r.linear_calls;
    row["table_bytes"] = r.table_bytes ? Json(*r.table_bytes) : Json(nullptr);
    if (!r.layer_step_snr_db.empty()) {
      Json snr = Json::object();
      for (std::size_t l = 0; l < r.layer_step_snr_db.size(); ++l) snr[report.layer_ids.at(l)] = r.layer_step_snr_db[l];
      row["layer_step_snr_db"] = std::move(snr);
    }
    rows.push_back(std::move(row));
  }
  Json doc{{"schema", kReportSchema},
           {"command", report.command},
           {"model", {{"config_hash", hex64(report.model.config_hash)}, {"description", report.model.description}}},
           {"schedule", {{"steps", report.steps}, {"cfg_scale", report.cfg_scale}}},
           {"eval", {{"prompts", report.eval_prompts}, {"seed", report.eval_seed}}},
           {"rows", std::move(rows)}};
  if (!report.averages.empty()) {
    Json avg = Json::array();
    for (const SchemeAverage& a : report.averages) {
      avg.push_back(Json{{"scheme", a.scheme}, {"rows", a.rows}, {"metrics", metrics_json(a.metrics)}});
    }
    doc["averages"] = std::move(avg);
  }
  if (report.alpha) {
    Json scores = Json::array();
    for (const AlphaScore& s : report.alpha->scores) scores.push_back(Json{{"alpha", s.alpha}, {"score", s.score}});
    doc["alpha_sweep"] = Json{{"scheme", report.alpha->scheme},
                              {"score", "mean cosine to float reference"},
                              {"best_alpha", report.alpha->best_alpha},
                              {"scores", std::move(scores)}};
  }
  return doc.dump(2) + "\n";
}

std::string to_text(const FidelityReport& report) {
  std::string out;
  out += "stq " + report.command + "  schema " + std::string(kReportSchema) + "\n";
  out += "model  " + report.model.description + "\n";
  out += line("steps %d  cfg %.2f  eval prompts %zu  eval seed %" PRIu64 "\n\n", report.steps, report.cfg_scale,
              report.eval_prompts, report.eval_seed);
  out += line("%-14s %-12s %-6s %4s %6s %12s %10s %9s %9s %10s\n", "scheme", "executor", "W/A", "R", "alpha", "MSE",
              "cosine", "PSNR(dB)", "stat-ops", "bytes");
  for (const RunRow& r : report.rows) {
    const std::string bytes = r.table_bytes ? std::to_string(*r.table_bytes) : "-";
    out += line("%-14s %-12s %-6s %4d %6.2f %12.4e %10.6f %9.2f %9" PRIu64 " %10s\n", r.scheme.c_str(),
                to_string(r.executor), bits_label(r).c_str(), r.ranges, r.alpha, r.metrics.mse, r.metrics.cosine,
                r.metrics.psnr_db, r.runtime_statistic_ops, bytes.c_str());
  }
  if (!report.averages.empty()) {
    out += "\nAverage\n";
    for (const SchemeAverage& a : report.averages) {
      out += line("%-14s %-12s %-6zu %4s %6s %12.4e %10.6f %9.2f\n", a.scheme.c_str(), "", a.rows, "", "",
                  a.metrics.mse, a.metrics.cosine, a.metrics.psnr_db);
    }
  }
  if (report.alpha) {
    out += "\nalpha sweep (" + report.alpha->scheme + ", score = mean cosine)\n";
    for (const AlphaScore& s : report.alpha->scores) {
      out += line("  alpha %.1f  %10.6f%s\n", s.alpha, s.score, s.alpha == report.alpha->best_alpha ? "  <- best" : "");
    }
  }
  return out;
}

}  // namespace stq::harness
