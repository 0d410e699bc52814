// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

// stq: calibrate static quantization tables for the toy video diffusion
// model and measure their fidelity against float inference.
//
// Exit codes: 0 success, 1 other failure, 2 invalid flags or configuration,
// 3 calibration failure, 4 table/model mismatch or unreadable table.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stq/calibration.hpp"
#include "stq/engine.hpp"
#include "stq/error.hpp"
#include "stq/harness.hpp"
#include "stq/table_file.hpp"

namespace {

namespace fs = std::filesystem;
using namespace stq;

constexpr int kExitOther = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCalibration = 3;
constexpr int kExitMismatch = 4;

struct CliFailure {
  int code;
  std::string message;
};

// Runs f, turning library errors into a failure with the given exit code.
template <typename F>
auto stage(int code, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw CliFailure{code, e.what()};
  }
}

struct ModelFlags {
  toy::ToyModelConfig config;
  int steps = 20;
  double cfg_scale = 7.0;

  void add(CLI::App& app) {
    app.add_option("--blocks", config.n_blocks, "transformer blocks")->capture_default_str();
    app.add_option("--d-model", config.d_model, "hidden width")->capture_default_str();
    app.add_option("--heads", config.n_heads, "attention heads")->capture_default_str();
    app.add_option("--frames", config.frames, "latent frames")->capture_default_str();
    app.add_option("--spatial-tokens", config.spatial_tokens, "tokens per frame")->capture_default_str();
    app.add_option("--cond-dim", config.cond_dim, "conditioning vector length")->capture_default_str();
    app.add_option("--model-seed", config.seed, "model initialisation seed")->capture_default_str();
    app.add_flag("--fit-head", config.fit_output_head, "ridge-fit the output head on synthetic data");
    app.add_option("--steps", steps, "denoising steps")->capture_default_str();
    app.add_option("--cfg", cfg_scale, "classifier-free guidance scale")->capture_default_str();
  }

  toy::ToyModel model() const {
    return stage(kExitUsage, [&] { return toy::build_model(config); });
  }
  toy::DiffusionSchedule schedule() const {
    return stage(kExitUsage, [&] { return toy::DiffusionSchedule::ddpm(steps, cfg_scale); });
  }
};

struct PromptFlags {
  std::string calib_path;
  std::uint64_t calib_seed = 1;
  int calib_prompts = 10;
  std::uint64_t eval_seed = 2;
  int eval_prompts = 10;

  void add_calibration(CLI::App& app, bool seed_alias) {
    app.add_option("--calib", calib_path, "calibration set fixture; synthesised from --calib-seed when omitted");
    auto* seed = app.add_option("--calib-seed", calib_seed, "seed of the synthetic calibration set")->capture_default_str();
    if (seed_alias) app.add_option("--seed", calib_seed, "alias of --calib-seed")->excludes(seed);
    app.add_option("--calib-prompts", calib_prompts, "synthetic calibration prompts")->capture_default_str();
  }
  void add_eval(CLI::App& app, bool seed_alias) {
    auto* seed = app.add_option("--eval-seed", eval_seed, "seed of the synthetic evaluation set")->capture_default_str();
    if (seed_alias) app.add_option("--seed", eval_seed, "alias of --eval-seed")->excludes(seed);
    app.add_option("--eval-prompts", eval_prompts, "evaluation prompts")->capture_default_str();
  }

  CalibrationSet calibration(const toy::ToyModelConfig& config) const {
    if (!calib_path.empty()) return stage(kExitCalibration, [&] { return load_calibration_set(calib_path); });
    return synthetic(calib_prompts, calib_seed, config);
  }
  CalibrationSet evaluation(const toy::ToyModelConfig& config) const {
    return synthetic(eval_prompts, eval_seed, config);
  }

 private:
  static CalibrationSet synthetic(int n, std::uint64_t seed, const toy::ToyModelConfig& config) {
    if (n < 1) throw CliFailure{kExitUsage, "prompt count must be at least 1"};
    return make_calibration_set(toy::synth_dataset(n, seed, config));
  }
};

struct QuantFlags {
  std::string scheme = "tsq-tsw";
  std::optional<int> tr;
  int w_bits = 8;
  int a_bits = 8;
  std::optional<double> alpha;
  double momentum = kDefaultMomentum;

  void add(CLI::App& app, bool with_scheme) {
    if (with_scheme) {
      app.add_option("--scheme", scheme, "cw-tw | asq | tsq-tsw")
          ->check(CLI::IsMember({"cw-tw", "asq", "tsq-tsw"}))
          ->capture_default_str();
      app.add_option("--tr", tr, "time ranges (default: 1, or every step for tsq-tsw)");
    }
    app.add_option("--w-bits", w_bits, "weight bits")->capture_default_str();
    app.add_option("--a-bits", a_bits, "activation bits")->capture_default_str();
    if (with_scheme) app.add_option("--alpha", alpha, "migration strength (default: 0.4 asq, 0.2 tsq-tsw)");
    app.add_option("--momentum", momentum, "abs-max running-average momentum")->capture_default_str();
  }

  QuantConfig config(int steps) const {
    const auto w = stage(kExitUsage, [&] { return BitWidth(w_bits); });
    const auto a = stage(kExitUsage, [&] { return BitWidth(a_bits); });
    if (scheme == "asq" && tr && *tr != 1) throw CliFailure{kExitUsage, "--tr: asq uses a single time range"};
    if (tr && (*tr < 1 || *tr > steps)) {
      throw CliFailure{kExitUsage, "--tr: must lie in [1, " + std::to_string(steps) + "]"};
    }
    if (alpha && !(*alpha >= 0.0 && *alpha <= 1.0)) throw CliFailure{kExitUsage, "--alpha: must lie in [0, 1]"};
    if (!(momentum >= 0.0 && momentum < 1.0)) throw CliFailure{kExitUsage, "--momentum: must lie in [0, 1)"};
    return stage(kExitUsage, [&] {
      QuantConfig c = harness::make_config(harness::parse_scheme(scheme), w, a, tr, alpha, steps);
      c.momentum = momentum;
      c.validate(steps);
      return c;
    });
  }
};

std::string default_output_dir() {
  const char* env = std::getenv("STQ_OUTPUT_DIR");
  return env != nullptr && *env != '\0' ? env : ".";
}

fs::path resolve_out(const std::string& out, const std::string& fallback_name) {
  fs::path p = out.empty() ? fs::path(default_output_dir()) / fallback_name : fs::path(out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

void write_report(const harness::FidelityReport& report, const fs::path& json_path) {
  fs::path text_path = json_path;
  text_path.replace_extension(".txt");
  const std::string text = harness::to_text(report);
  write_file_atomic(json_path, harness::to_json(report));
  write_file_atomic(text_path, text);
  std::cout << text << "\nwrote " << json_path.string() << " and " << text_path.string() << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::pair<int, int> parse_bit_pair(const std::string& s) {
  const auto slash = s.find('/');
  try {
    if (slash == std::string::npos) throw std::invalid_argument(s);
    std::size_t used_w = 0, used_a = 0;
    const int w = std::stoi(s.substr(0, slash), &used_w);
    const int a = std::stoi(s.substr(slash + 1), &used_a);
    if (used_w != slash || used_a != s.size() - slash - 1) throw std::invalid_argument(s);
    BitWidth{w};
    BitWidth{a};
    return {w, a};
  } catch (const std::exception&) {
    throw CliFailure{kExitUsage, "--bits: expected W/A pairs like 8/8, got '" + s + "'"};
  }
}

int cmd_gen_calib(int prompts, std::uint64_t seed, const ModelFlags& mf, const std::string& out) {
  if (prompts < 1) throw CliFailure{kExitUsage, "--prompts must be at least 1"};
  const fs::path path = resolve_out(out, "calibration_set.txt");
  const CalibrationSet set = make_calibration_set(toy::synth_dataset(prompts, seed, mf.config));
  write_file_atomic(path, format_calibration_set(set));
  std::cout << "wrote " << set.size() << " prompts to " << path.string() << "\n";
  return 0;
}

int cmd_calibrate(const ModelFlags& mf, const PromptFlags& pf, const QuantFlags& qf, const std::string& out) {
  const toy::DiffusionSchedule schedule = mf.schedule();
  const QuantConfig config = qf.config(schedule.steps);
  const toy::ToyModel model = mf.model();
  const CalibrationSet prompts = pf.calibration(mf.config);
  const TimeStepTable table =
      stage(kExitCalibration, [&] { return run_calibration(model, prompts, config, schedule); });
  const fs::path path = resolve_out(out, "table.stqt");
  const std::vector<std::uint8_t> bytes = encode_table(table);
  stage(kExitCalibration, [&] { return decode_table(bytes) == table; });
  write_file_atomic(path, bytes);
  std::cout << "scheme " << table.scheme_tag() << "  W" << config.w_bits.bits() << "A" << config.a_bits.bits()
            << "  alpha " << config.alpha << "\n"
            << "layers " << table.layers().size() << "  ranges " << table.partition().size() << "  bytes "
            << bytes.size() << "\n"
            << "wrote " << path.string() << "\n";
  return 0;
}

int cmd_compare(const ModelFlags& mf, const PromptFlags& pf, const std::vector<std::string>& tables,
                const std::vector<std::string>& baselines, int w_bits, int a_bits, bool probe_snr,
                const std::string& out) {
  if (tables.empty() && baselines.empty()) throw CliFailure{kExitUsage, "give at least one --table or --baseline"};
  const toy::DiffusionSchedule schedule = mf.schedule();
  const toy::ToyModel model = mf.model();
  const auto bits = stage(kExitUsage, [&] { return std::pair{BitWidth(w_bits), BitWidth(a_bits)}; });

  std::vector<TimeStepTable> loaded;
  for (const std::string& t : tables) {
    loaded.push_back(stage(kExitMismatch, [&] { return load_table(t); }));
    if (loaded.back().partition().total_steps() != schedule.steps) {
      throw CliFailure{kExitMismatch, t + ": table covers " + std::to_string(loaded.back().partition().total_steps()) +
                                          " steps, schedule runs " + std::to_string(schedule.steps)};
    }
    // Surface mismatches before spending time on the float references.
    stage(kExitMismatch, [&] { return bind(model, loaded.back(), ExecutorKind::StaticFakeQuant).layers().size(); });
  }

  const harness::Evaluator eval(model, schedule, pf.evaluation(mf.config), pf.eval_seed);
  harness::FidelityReport report = eval.report("compare");
  for (const std::string& b : baselines) {
    if (b == "fp") {
      QuantizedExecutor exec = bind_float(model);
      report.rows.push_back(eval.run("FP", exec, probe_snr));
    } else if (b == "dynamic") {
      QuantizedExecutor exec = bind_dynamic(model, bits.first, bits.second);
      harness::RunRow row = eval.run("Dynamic", exec, probe_snr);
      row.w_bits = w_bits;
      row.a_bits = a_bits;
      report.rows.push_back(std::move(row));
    }
  }
  for (const TimeStepTable& t : loaded) report.rows.push_back(harness::run_table(eval, t, probe_snr));
  write_report(report, resolve_out(out, "compare.json"));
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Static quantization tables for a toy spatial-temporal diffusion transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "stq table format " + std::to_string(kTableFormatVersion));

  ModelFlags mf;
  PromptFlags pf;
  QuantFlags qf;
  std::string out;

  auto* gen = app.add_subcommand("gen-calib", "write a synthetic calibration set fixture");
  int gen_prompts = 10;
  std::uint64_t gen_seed = 1;
  gen->add_option("--prompts", gen_prompts, "number of prompts")->capture_default_str();
  gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();
  gen->add_option("--out", out, "output path");
  mf.add(*gen);

  auto* cal = app.add_subcommand("calibrate", "calibrate and write a TimeStepTable");
  mf.add(*cal);
  pf.add_calibration(*cal, true);
  qf.add(*cal, true);
  cal->add_option("--out", out, "table path (default $STQ_OUTPUT_DIR/table.stqt)");

  auto* cmp = app.add_subcommand("compare", "fidelity of tables and baselines against float inference");
  std::vector<std::string> tables, baselines;
  bool probe_snr = true;
  mf.add(*cmp);
  pf.add_eval(*cmp, true);
  cmp->add_option("--table", tables, "table file (repeatable)");
  cmp->add_option("--baseline", baselines, "fp | dynamic (repeatable)")->check(CLI::IsMember({"fp", "dynamic"}));
  cmp->add_option("--w-bits", qf.w_bits, "dynamic baseline weight bits")->capture_default_str();
  cmp->add_option("--a-bits", qf.a_bits, "dynamic baseline activation bits")->capture_default_str();
  cmp->add_flag("!--no-snr", probe_snr, "skip per-layer per-step SNR");
  cmp->add_option("--out", out, "report path (.json; a .txt table is written beside it)");

  auto* bsw = app.add_subcommand("bitsweep", "scheme x bit-width fidelity matrix");
  std::string schemes = "cw-tw,asq,tsq-tsw";
  std::vector<std::string> bit_pairs;
  mf.add(*bsw);
  pf.add_calibration(*bsw, false);
  pf.add_eval(*bsw, false);
  bsw->add_option("--schemes", schemes, "comma-separated schemes")->capture_default_str();
  bsw->add_option("--bits", bit_pairs, "W/A pairs (default: the nine-pair grid)");
  bsw->add_option("--momentum", qf.momentum, "abs-max running-average momentum")->capture_default_str();
  bsw->add_option("--out", out, "report path");

  auto* tsw = app.add_subcommand("trsweep", "fidelity and table size against the number of time ranges");
  std::vector<int> range_list;
  mf.add(*tsw);
  pf.add_calibration(*tsw, false);
  pf.add_eval(*tsw, false);
  qf.add(*tsw, false);
  tsw->add_option("--scheme", qf.scheme, "cw-tw | tsq-tsw")->check(CLI::IsMember({"cw-tw", "tsq-tsw"}))->capture_default_str();
  tsw->add_option("--alpha", qf.alpha, "migration strength for tsq-tsw");
  tsw->add_option("--ranges", range_list, "range counts (default 1 2 4 10 20)");
  tsw->add_option("--out", out, "report path");

  auto* asw = app.add_subcommand("alpha-sweep", "grid search of the migration strength");
  mf.add(*asw);
  pf.add_calibration(*asw, false);
  pf.add_eval(*asw, false);
  qf.add(*asw, true);
  asw->add_option("--out", out, "report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  if (*gen) return cmd_gen_calib(gen_prompts, gen_seed, mf, out);
  if (*cal) return cmd_calibrate(mf, pf, qf, out);
  if (*cmp) return cmd_compare(mf, pf, tables, baselines, qf.w_bits, qf.a_bits, probe_snr, out);

  const toy::DiffusionSchedule schedule = mf.schedule();
  const toy::ToyModel model = mf.model();

  if (*bsw) {
    std::vector<harness::SweepScheme> list;
    for (const std::string& s : split_list(schemes)) {
      list.push_back({stage(kExitUsage, [&] { return harness::parse_scheme(s); }), std::nullopt, std::nullopt});
    }
    if (list.empty()) throw CliFailure{kExitUsage, "--schemes is empty"};
    std::vector<std::pair<int, int>> grid;
    for (const std::string& b : bit_pairs) {
      for (const std::string& piece : split_list(b)) grid.push_back(parse_bit_pair(piece));
    }
    if (grid.empty()) grid = harness::default_bit_grid();
    if (!(qf.momentum >= 0.0 && qf.momentum < 1.0)) throw CliFailure{kExitUsage, "--momentum: must lie in [0, 1)"};
    const ObservationLog log =
        stage(kExitCalibration, [&] { return collect_observations(model, pf.calibration(mf.config), schedule); });
    const harness::Evaluator eval(model, schedule, pf.evaluation(mf.config), pf.eval_seed);
    write_report(harness::bitsweep(log, eval, list, grid, qf.momentum), resolve_out(out, "bitsweep.json"));
    return 0;
  }

  if (*tsw) {
    if (range_list.empty()) range_list = harness::default_range_list();
    for (int r : range_list) {
      qf.tr = r;
      qf.config(schedule.steps);
    }
    const ObservationLog log =
        stage(kExitCalibration, [&] { return collect_observations(model, pf.calibration(mf.config), schedule); });
    const harness::Evaluator eval(model, schedule, pf.evaluation(mf.config), pf.eval_seed);
    write_report(harness::trsweep(log, eval, harness::parse_scheme(qf.scheme), BitWidth(qf.w_bits), BitWidth(qf.a_bits),
                                  range_list, qf.alpha, qf.momentum),
                 resolve_out(out, "trsweep.json"));
    return 0;
  }

  if (*asw) {
    const QuantConfig config = qf.config(schedule.steps);
    const ObservationLog log =
        stage(kExitCalibration, [&] { return collect_observations(model, pf.calibration(mf.config), schedule); });
    const harness::Evaluator eval(model, schedule, pf.evaluation(mf.config), pf.eval_seed);
    const harness::FidelityReport report =
        stage(kExitCalibration, [&] { return harness::alpha_sweep_report(log, eval, config); });
    write_report(report, resolve_out(out, "alpha_sweep.json"));
    return 0;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const CliFailure& f) {
    std::cerr << "stq: " << f.message << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "stq: " << e.what() << "\n";
    return kExitOther;
  }
}
