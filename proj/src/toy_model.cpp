// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/toy_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "stq/error.hpp"
#include "stq/random.hpp"

namespace stq::toy {
namespace {

constexpr double kHeadGain = 0.03;
constexpr double kModulationGain = 0.6;
constexpr double kOutlierNormGain = 8.0;
constexpr int kOutlierStride = 16;
constexpr double kNormEps = 1e-6;

Linear random_linear(Rng& rng, std::string name, std::size_t out, std::size_t in, double stddev,
                     double bias_stddev) {
  Tensor2D w(out, in);
  for (double& v : w.values()) v = rng.normal(0.0, stddev);
  std::vector<double> b(out);
  for (double& v : b) v = rng.normal(0.0, bias_stddev);
  return Linear{std::move(name), -1, std::move(w), std::move(b)};
}

void add_bias(Tensor2D& y, const std::vector<double>& bias) {
  for (std::size_t t = 0; t < y.rows(); ++t) {
    auto row = y.row(t);
    for (std::size_t o = 0; o < row.size(); ++o) row[o] += bias[o];
  }
}

Tensor2D apply_float(const Linear& layer, const Tensor2D& x) {
  Tensor2D y = matmul_transposed(x, layer.weight);
  add_bias(y, layer.bias);
  return y;
}

Tensor2D apply(const Linear& layer, LinearExecutor& executor, int step, const Tensor2D& x) {
  Tensor2D y = executor.linear(layer, step, x);
  if (y.rows() != x.rows() || y.cols() != layer.weight.rows()) {
    throw Error(ErrorCode::ShapeError, "executor returned wrong shape for " + layer.name);
  }
  add_bias(y, layer.bias);
  return y;
}

std::vector<double> matvec(const Linear& layer, std::span<const double> v) {
  std::vector<double> out(layer.weight.rows());
  for (std::size_t o = 0; o < out.size(); ++o) {
    const auto row = layer.weight.row(o);
    double acc = layer.bias[o];
    for (std::size_t i = 0; i < row.size(); ++i) acc += row[i] * v[i];
    out[o] = acc;
  }
  return out;
}

double silu(double v) { return v / (1.0 + std::exp(-v)); }

double gelu(double v) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
}

// Layer norm without affine terms, one token per row.
Tensor2D normalize_rows(const Tensor2D& h) {
  Tensor2D out(h.rows(), h.cols());
  const double n = static_cast<double>(h.cols());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    const auto row = h.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    auto dst = out.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) dst[c] = (row[c] - mean) * inv;
  }
  return out;
}

Tensor2D modulated_norm(const Tensor2D& h, std::span<const double> gain, std::span<const double> shift,
                        std::span<const double> scale) {
  Tensor2D u = normalize_rows(h);
  for (std::size_t t = 0; t < u.rows(); ++t) {
    auto row = u.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] * gain[c] * (1.0 + scale[c]) + shift[c];
  }
  return u;
}

// Multi-head attention of the query rows in `groups[g]` against the key rows
// of the same group. Output rows follow the query rows.
void attend_groups(const Tensor2D& q, const Tensor2D& k, const Tensor2D& v, int n_heads,
                   const std::vector<std::vector<std::size_t>>& query_groups,
                   const std::vector<std::vector<std::size_t>>& key_groups, Tensor2D& out) {
  const std::size_t d = q.cols();
  const std::size_t head_dim = d / static_cast<std::size_t>(n_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<double> scores;
  for (std::size_t g = 0; g < query_groups.size(); ++g) {
    const auto& qs = query_groups[g];
    const auto& ks = key_groups[g];
    scores.resize(ks.size());
    for (int head = 0; head < n_heads; ++head) {
      const std::size_t off = static_cast<std::size_t>(head) * head_dim;
      for (std::size_t qi : qs) {
        double top = -INFINITY;
        for (std::size_t j = 0; j < ks.size(); ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < head_dim; ++c) s += q(qi, off + c) * k(ks[j], off + c);
          scores[j] = s * inv_sqrt;
          top = std::max(top, scores[j]);
        }
        double sum = 0.0;
        for (double& s : scores) {
          s = std::exp(s - top);
          sum += s;
        }
        for (std::size_t c = 0; c < head_dim; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < ks.size(); ++j) acc += scores[j] * v(ks[j], off + c);
          out(qi, off + c) = acc / sum;
        }
      }
    }
  }
}

std::vector<std::vector<std::size_t>> frame_groups(int frames, int spatial) {
  std::vector<std::vector<std::size_t>> groups(frames);
  for (int f = 0; f < frames; ++f) {
    for (int s = 0; s < spatial; ++s) groups[f].push_back(static_cast<std::size_t>(f * spatial + s));
  }
  return groups;
}

std::vector<std::vector<std::size_t>> position_groups(int frames, int spatial) {
  std::vector<std::vector<std::size_t>> groups(spatial);
  for (int s = 0; s < spatial; ++s) {
    for (int f = 0; f < frames; ++f) groups[s].push_back(static_cast<std::size_t>(f * spatial + s));
  }
  return groups;
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

const char* to_string(LayerFamily family) noexcept {
  switch (family) {
    case LayerFamily::SpatialAttention: return "spatial_attn";
    case LayerFamily::TemporalAttention: return "temporal_attn";
    case LayerFamily::CrossAttention: return "cross_attn";
    case LayerFamily::FeedForward: return "ff";
  }
  return "unknown";
}

void ToyModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw Error(ErrorCode::InvalidConfig, what);
  };
  require(n_blocks >= 1, "n_blocks must be at least 1");
  require(d_model >= 2 && d_model % 2 == 0, "d_model must be a positive even count");
  require(n_heads >= 1, "n_heads must be at least 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(frames >= 1, "frames must be at least 1");
  require(spatial_tokens >= 1, "spatial_tokens must be at least 1");
  require(cond_dim >= 1, "cond_dim must be at least 1");
  require(context_tokens >= 1, "context_tokens must be at least 1");
  require(ff_mult >= 1, "ff_mult must be at least 1");
}

std::string ToyModelConfig::describe() const {
  std::ostringstream os;
  os << "n_blocks=" << n_blocks << ";d_model=" << d_model << ";n_heads=" << n_heads << ";frames=" << frames
     << ";spatial_tokens=" << spatial_tokens << ";cond_dim=" << cond_dim << ";context_tokens=" << context_tokens
     << ";ff_mult=" << ff_mult << ";seed=" << seed << ";fit_output_head=" << (fit_output_head ? 1 : 0);
  return os.str();
}

std::uint64_t ToyModelConfig::hash() const { return fnv1a(describe()); }

Tensor2D FloatExecutor::linear(const Linear& layer, int, const Tensor2D& x) {
  return matmul_transposed(x, layer.weight);
}

DiffusionSchedule DiffusionSchedule::ddpm(int steps, double cfg_scale, int train_steps) {
  if (steps < 1 || train_steps < steps) throw Error(ErrorCode::InvalidConfig, "invalid step counts");
  // Linear betas from 1e-4 to 0.02 over the training horizon.
  std::vector<double> full(static_cast<std::size_t>(train_steps));
  double running = 1.0;
  for (int t = 0; t < train_steps; ++t) {
    const double beta = train_steps == 1 ? 1e-4 : 1e-4 + (0.02 - 1e-4) * t / (train_steps - 1);
    running *= 1.0 - beta;
    full[static_cast<std::size_t>(t)] = running;
  }
  DiffusionSchedule s;
  s.steps = steps;
  s.cfg_scale = cfg_scale;
  // Evenly respaced timesteps, visited from the noisiest down.
  const double stride = steps == 1 ? 0.0 : static_cast<double>(train_steps - 1) / (steps - 1);
  for (int k = steps - 1; k >= 0; --k) {
    const int t = steps == 1 ? train_steps - 1 : static_cast<int>(std::lround(k * stride));
    s.timesteps.push_back(t);
    s.alpha_bar.push_back(full[static_cast<std::size_t>(t)]);
  }
  return s;
}

double DiffusionSchedule::alpha_bar_prev(int step) const {
  return step + 1 < steps ? alpha_bar[static_cast<std::size_t>(step + 1)] : 1.0;
}

std::vector<double> channel_scale_profile(int d_model) {
  std::vector<double> sigma(static_cast<std::size_t>(d_model));
  for (int c = 0; c < d_model; ++c) {
    double s = std::exp(0.5 * std::sin(2.0 * std::numbers::pi * 1.5 * c / d_model));
    if (c % kOutlierStride == 7) s *= 5.0;
    sigma[static_cast<std::size_t>(c)] = s;
  }
  return sigma;
}

const Linear& ToyModel::layer(std::size_t index) const {
  if (index >= quantizable_.size()) {
    throw Error(ErrorCode::UnknownLayer, "layer index " + std::to_string(index) + " out of range");
  }
  return *quantizable_[index];
}

std::optional<std::size_t> ToyModel::find_layer(std::string_view id) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].id == id) return i;
  }
  return std::nullopt;
}

Tensor2D ToyModel::context(std::span<const double> cond) const {
  if (cond.size() != static_cast<std::size_t>(config_.cond_dim)) {
    throw Error(ErrorCode::InvalidInput, "conditioning vector has " + std::to_string(cond.size()) +
                                             " entries, expected " + std::to_string(config_.cond_dim));
  }
  const std::vector<double> flat = matvec(cond_proj_, cond);
  Tensor2D ctx(static_cast<std::size_t>(config_.context_tokens), static_cast<std::size_t>(config_.d_model), flat);
  return normalize_rows(ctx);
}

Tensor2D ToyModel::null_context() const {
  return context(std::vector<double>(static_cast<std::size_t>(config_.cond_dim), 0.0));
}

std::vector<double> ToyModel::timestep_embedding(double timestep) const {
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  const std::size_t half = d / 2;
  std::vector<double> freq(d);
  for (std::size_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    freq[i] = std::sin(timestep * f);
    freq[half + i] = std::cos(timestep * f);
  }
  std::vector<double> emb = matvec(t_embed_, freq);
  for (double& v : emb) v = silu(v);
  return emb;
}

Tensor2D ToyModel::hidden(const Tensor2D& x_t, double timestep, int step, const Tensor2D& context,
                          LinearExecutor& executor) const {
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  if (x_t.rows() != static_cast<std::size_t>(config_.tokens()) || x_t.cols() != d) {
    throw Error(ErrorCode::ShapeError, "latent shape does not match the model");
  }
  const auto frames = frame_groups(config_.frames, config_.spatial_tokens);
  const auto positions = position_groups(config_.frames, config_.spatial_tokens);
  std::vector<std::size_t> all_tokens(x_t.rows());
  for (std::size_t i = 0; i < all_tokens.size(); ++i) all_tokens[i] = i;
  std::vector<std::size_t> ctx_tokens(context.rows());
  for (std::size_t i = 0; i < ctx_tokens.size(); ++i) ctx_tokens[i] = i;
  const std::vector<std::vector<std::size_t>> cross_queries{all_tokens};
  const std::vector<std::vector<std::size_t>> cross_keys{ctx_tokens};

  Tensor2D h = apply_float(x_embed_, x_t);
  const std::vector<double> temb = timestep_embedding(timestep);

  auto add_into = [](Tensor2D& dst, const Tensor2D& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst.values()[i] += src.values()[i];
  };

  for (const Block& block : blocks_) {
    const std::vector<double> mod = matvec(block.modulation, temb);
    auto sub_input = [&](int j) {
      const std::span<const double> m(mod);
      const std::span<const double> g(block.norm_gain);
      return modulated_norm(h, g.subspan(j * d, d), m.subspan(2 * j * d, d), m.subspan((2 * j + 1) * d, d));
    };

    {
      const Tensor2D u = sub_input(0);
      const Tensor2D q = apply(block.spatial_q, executor, step, u);
      const Tensor2D k = apply(block.spatial_k, executor, step, u);
      const Tensor2D v = apply(block.spatial_v, executor, step, u);
      Tensor2D a(h.rows(), d);
      attend_groups(q, k, v, config_.n_heads, frames, frames, a);
      add_into(h, apply(block.spatial_out, executor, step, a));
    }
    {
      const Tensor2D u = sub_input(1);
      const Tensor2D q = apply(block.temporal_q, executor, step, u);
      const Tensor2D k = apply(block.temporal_k, executor, step, u);
      const Tensor2D v = apply(block.temporal_v, executor, step, u);
      Tensor2D a(h.rows(), d);
      attend_groups(q, k, v, config_.n_heads, positions, positions, a);
      add_into(h, apply(block.temporal_out, executor, step, a));
    }
    {
      const Tensor2D u = sub_input(2);
      const Tensor2D q = apply(block.cross_q, executor, step, u);
      const Tensor2D k = apply(block.cross_k, executor, step, context);
      const Tensor2D v = apply(block.cross_v, executor, step, context);
      Tensor2D a(h.rows(), d);
      attend_groups(q, k, v, config_.n_heads, cross_queries, cross_keys, a);
      add_into(h, apply(block.cross_out, executor, step, a));
    }
    {
      const Tensor2D u = sub_input(3);
      Tensor2D inner = apply(block.ff_in, executor, step, u);
      for (double& x : inner.values()) x = gelu(x);
      add_into(h, apply(block.ff_out, executor, step, inner));
    }
  }
  return normalize_rows(h);
}

Tensor2D ToyModel::head_features(const Tensor2D& x_t, const DiffusionSchedule& schedule, int step,
                                 const Tensor2D& context, LinearExecutor& executor) const {
  if (step < 0 || step >= schedule.steps) throw Error(ErrorCode::StepOutOfRange, "step outside schedule");
  return hidden(x_t, schedule.timesteps[static_cast<std::size_t>(step)], step, context, executor);
}

Tensor2D ToyModel::predict_noise(const Tensor2D& x_t, const DiffusionSchedule& schedule, int step,
                                 const Tensor2D& context, LinearExecutor& executor) const {
  Tensor2D eps = apply_float(head_, head_features(x_t, schedule, step, context, executor));
  const double ab = schedule.alpha_bar[static_cast<std::size_t>(step)];
  const double noise_std = std::sqrt(1.0 - ab);
  for (std::size_t t = 0; t < eps.rows(); ++t) {
    const auto x = x_t.row(t);
    auto e = eps.row(t);
    for (std::size_t c = 0; c < e.size(); ++c) {
      e[c] += noise_std * x[c] / (ab * prior_variance_[c] + 1.0 - ab);
    }
  }
  return eps;
}

ToyModel build_model(const ToyModelConfig& config) {
  config.validate();
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  const std::size_t ff = d * static_cast<std::size_t>(config.ff_mult);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Rng rng(config.seed);
  ToyModel m;
  m.config_ = config;

  m.x_embed_ = random_linear(rng, "x_embed", d, d, 0.05 * inv_sqrt_d, 0.0);
  for (std::size_t i = 0; i < d; ++i) m.x_embed_.weight(i, i) += 1.0;
  m.t_embed_ = random_linear(rng, "t_embed", d, d, inv_sqrt_d, 0.1);
  m.cond_proj_ = random_linear(rng, "cond_proj", static_cast<std::size_t>(config.context_tokens) * d,
                               static_cast<std::size_t>(config.cond_dim),
                               1.0 / std::sqrt(static_cast<double>(config.cond_dim)), 0.5);
  m.head_ = random_linear(rng, "head", d, d, kHeadGain * inv_sqrt_d, 0.0);

  for (int b = 0; b < config.n_blocks; ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    ToyModel::Block block;
    block.norm_gain.resize(4 * d);
    for (std::size_t i = 0; i < block.norm_gain.size(); ++i) {
      double g = 1.0 + rng.normal(0.0, 0.1);
      if (static_cast<int>(i % d) % kOutlierStride == 3) g *= kOutlierNormGain;
      block.norm_gain[i] = g;
    }
    block.modulation = random_linear(rng, prefix + "modulation", 8 * d, d, kModulationGain * inv_sqrt_d, 0.0);
    auto attn = [&](const std::string& family, Linear& q, Linear& k, Linear& v, Linear& out) {
      q = random_linear(rng, prefix + family + ".q", d, d, inv_sqrt_d, 0.02);
      k = random_linear(rng, prefix + family + ".k", d, d, inv_sqrt_d, 0.02);
      v = random_linear(rng, prefix + family + ".v", d, d, inv_sqrt_d, 0.02);
      out = random_linear(rng, prefix + family + ".out", d, d, inv_sqrt_d, 0.02);
    };
    attn("spatial_attn", block.spatial_q, block.spatial_k, block.spatial_v, block.spatial_out);
    attn("temporal_attn", block.temporal_q, block.temporal_k, block.temporal_v, block.temporal_out);
    attn("cross_attn", block.cross_q, block.cross_k, block.cross_v, block.cross_out);
    block.ff_in = random_linear(rng, prefix + "ff.in", ff, d, inv_sqrt_d, 0.02);
    block.ff_out = random_linear(rng, prefix + "ff.out", d, ff, 1.0 / std::sqrt(static_cast<double>(ff)), 0.02);
    m.blocks_.push_back(std::move(block));
  }

  for (std::size_t b = 0; b < m.blocks_.size(); ++b) {
    ToyModel::Block& blk = m.blocks_[b];
    const std::pair<Linear*, LayerFamily> routed[] = {
        {&blk.spatial_q, LayerFamily::SpatialAttention},   {&blk.spatial_k, LayerFamily::SpatialAttention},
        {&blk.spatial_v, LayerFamily::SpatialAttention},   {&blk.spatial_out, LayerFamily::SpatialAttention},
        {&blk.temporal_q, LayerFamily::TemporalAttention}, {&blk.temporal_k, LayerFamily::TemporalAttention},
        {&blk.temporal_v, LayerFamily::TemporalAttention}, {&blk.temporal_out, LayerFamily::TemporalAttention},
        {&blk.cross_q, LayerFamily::CrossAttention},       {&blk.cross_k, LayerFamily::CrossAttention},
        {&blk.cross_v, LayerFamily::CrossAttention},       {&blk.cross_out, LayerFamily::CrossAttention},
        {&blk.ff_in, LayerFamily::FeedForward},            {&blk.ff_out, LayerFamily::FeedForward},
    };
    for (const auto& [lin, family] : routed) {
      lin->layer_index = static_cast<int>(m.quantizable_.size());
      m.quantizable_.push_back(lin);
      m.layers_.push_back(LayerInfo{lin->name, family, static_cast<int>(b), lin->weight.cols(), lin->weight.rows()});
    }
  }

  const std::vector<double> sigma = channel_scale_profile(config.d_model);
  m.prior_variance_.resize(d);
  for (std::size_t c = 0; c < d; ++c) m.prior_variance_[c] = sigma[c] * sigma[c];

  if (config.fit_output_head) {
    // Ridge regression of the prior's residual noise onto the head features.
    const DiffusionSchedule schedule = DiffusionSchedule::ddpm();
    const std::vector<SynthSample> data = synth_dataset(8, config.seed ^ 0x9e3779b97f4a7c15ULL, config);
    Rng noise_rng(config.seed + 17);
    const Eigen::Index nf = static_cast<Eigen::Index>(d) + 1;
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(nf, nf);
    Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(nf, static_cast<Eigen::Index>(d));
    FloatExecutor exec;
    std::size_t rows = 0;
    for (const SynthSample& sample : data) {
      const Tensor2D ctx = m.context(sample.cond);
      for (int step : {0, 5, 10, 15, 19}) {
        const double ab = schedule.alpha_bar[static_cast<std::size_t>(step)];
        Tensor2D noise(sample.latent.data.rows(), d);
        for (double& v : noise.values()) v = noise_rng.normal();
        Tensor2D x_t(noise.rows(), d);
        for (std::size_t i = 0; i < x_t.size(); ++i) {
          x_t.values()[i] = std::sqrt(ab) * sample.latent.data.values()[i] + std::sqrt(1.0 - ab) * noise.values()[i];
        }
        const Tensor2D feats = m.head_features(x_t, schedule, step, ctx, exec);
        for (std::size_t t = 0; t < feats.rows(); ++t) {
          Eigen::VectorXd f(nf);
          for (std::size_t c = 0; c < d; ++c) f(static_cast<Eigen::Index>(c)) = feats(t, c);
          f(nf - 1) = 1.0;
          Eigen::RowVectorXd target(static_cast<Eigen::Index>(d));
          for (std::size_t c = 0; c < d; ++c) {
            const double prior = std::sqrt(1.0 - ab) * x_t(t, c) / (ab * m.prior_variance_[c] + 1.0 - ab);
            target(static_cast<Eigen::Index>(c)) = noise(t, c) - prior;
          }
          gram += f * f.transpose();
          cross += f * target;
          ++rows;
        }
      }
    }
    gram += 1e-3 * static_cast<double>(rows) * Eigen::MatrixXd::Identity(nf, nf);
    const Eigen::MatrixXd solution = gram.ldlt().solve(cross);  // nf x d
    for (std::size_t o = 0; o < d; ++o) {
      for (std::size_t c = 0; c < d; ++c) {
        m.head_.weight(o, c) = solution(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(o));
      }
      m.head_.bias[o] = solution(nf - 1, static_cast<Eigen::Index>(o));
    }
  }
  return m;
}

LatentVideo denoise(const ToyModel& model, const DiffusionSchedule& schedule, std::span<const double> cond,
                    std::uint64_t seed, LinearExecutor& executor) {
  if (const auto expected = executor.expected_steps(); expected && *expected != schedule.steps) {
    throw Error(ErrorCode::StepCountMismatch, "executor prepared for " + std::to_string(*expected) +
                                                  " steps, schedule has " + std::to_string(schedule.steps));
  }
  if (static_cast<int>(schedule.alpha_bar.size()) != schedule.steps ||
      static_cast<int>(schedule.timesteps.size()) != schedule.steps) {
    throw Error(ErrorCode::StepCountMismatch, "schedule tables do not match its step count");
  }
  const ToyModelConfig& cfg = model.config();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const Tensor2D ctx_cond = model.context(cond);
  const Tensor2D ctx_null = model.null_context();

  Rng rng(seed);
  Tensor2D x(static_cast<std::size_t>(cfg.tokens()), d);
  for (double& v : x.values()) v = rng.normal();

  for (int k = 0; k < schedule.steps; ++k) {
    const Tensor2D eps_u = model.predict_noise(x, schedule, k, ctx_null, executor);
    const Tensor2D eps_c = model.predict_noise(x, schedule, k, ctx_cond, executor);
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(k)];
    const double abp = schedule.alpha_bar_prev(k);
    const double alpha = ab / abp;
    const double beta = 1.0 - alpha;
    const double c_x0 = std::sqrt(abp) * beta / (1.0 - ab);
    const double c_xt = std::sqrt(alpha) * (1.0 - abp) / (1.0 - ab);
    const double sd = std::sqrt(beta * (1.0 - abp) / (1.0 - ab));
    const bool last = k + 1 == schedule.steps;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = eps_u.values()[i];
      const double eps = u + schedule.cfg_scale * (eps_c.values()[i] - u);
      const double xt = x.values()[i];
      const double x0 = (xt - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
      double next = c_x0 * x0 + c_xt * xt;
      if (!last) next += sd * rng.normal();
      x.values()[i] = next;
    }
  }
  return LatentVideo{cfg.frames, cfg.spatial_tokens, std::move(x)};
}

std::vector<SynthSample> synth_dataset(int n, std::uint64_t seed, const ToyModelConfig& config) {
  if (n < 1) throw Error(ErrorCode::InvalidInput, "dataset size must be at least 1");
  config.validate();
  const std::size_t d = static_cast<std::size_t>(config.d_model);
  const std::size_t cd = static_cast<std::size_t>(config.cond_dim);
  const std::vector<double> sigma = channel_scale_profile(config.d_model);
  constexpr double kFrameCorrelation = 0.8;

  Rng rng(seed);
  Tensor2D pattern(d, cd);
  for (double& v : pattern.values()) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(cd)));

  std::vector<SynthSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<double> cond(cd);
    for (double& v : cond) v = rng.normal();
    std::vector<double> mean(d);
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cd; ++j) acc += pattern(c, j) * cond[j];
      mean[c] = std::tanh(acc);
    }
    Tensor2D latent(static_cast<std::size_t>(config.tokens()), d);
    std::vector<double> prev(static_cast<std::size_t>(config.spatial_tokens) * d, 0.0);
    for (int f = 0; f < config.frames; ++f) {
      for (int s = 0; s < config.spatial_tokens; ++s) {
        for (std::size_t c = 0; c < d; ++c) {
          double& state = prev[static_cast<std::size_t>(s) * d + c];
          const double fresh = rng.normal();
          state = f == 0 ? fresh : kFrameCorrelation * state + std::sqrt(1.0 - kFrameCorrelation * kFrameCorrelation) * fresh;
          latent(static_cast<std::size_t>(f * config.spatial_tokens + s), c) = sigma[c] * (0.6 * mean[c] + 0.8 * state);
        }
      }
    }
    const std::uint64_t noise_seed = rng.next_u64();
    out.push_back(SynthSample{LatentVideo{config.frames, config.spatial_tokens, std::move(latent)}, std::move(cond),
                              noise_seed});
  }
  return out;
}

}  // namespace stq::toy
