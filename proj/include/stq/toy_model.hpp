// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

/*
 * Desk-scale spatial-temporal diffusion transformer.
 *
 * Latents are frames x spatial_tokens x d_model, stored as a Tensor2D with
 * row f * spatial_tokens + s. Each block applies, in order, spatial
 * self-attention (tokens of one frame), temporal self-attention (one spatial
 * position across frames), prompt cross-attention and a pointwise
 * feed-forward. Their linears are the quantizable layers and are routed
 * through a LinearExecutor; the input embedding, timestep and prompt
 * projections and the output head always run in float.
 *
 * The predicted noise is the closed-form posterior mean for a Gaussian prior
 * with the synthetic data's per-channel scales plus the transformer head's
 * output, which keeps a 20-step sampler well behaved for any weights.
 */

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stq/tensor.hpp"

namespace stq::toy {

struct ToyModelConfig {
  int n_blocks = 2;
  int d_model = 64;
  int n_heads = 4;
  int frames = 4;
  int spatial_tokens = 16;
  int cond_dim = 32;
  int context_tokens = 4;
  int ff_mult = 4;
  std::uint64_t seed = 0;
  bool fit_output_head = false;

  /// Throws InvalidConfig.
  void validate() const;
  int tokens() const noexcept { return frames * spatial_tokens; }
  /// FNV-1a over the canonical description; tables record it to detect
  /// model mismatches.
  std::uint64_t hash() const;
  std::string describe() const;

  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;
};

enum class LayerFamily { SpatialAttention, TemporalAttention, CrossAttention, FeedForward };

const char* to_string(LayerFamily family) noexcept;

struct Linear {
  std::string name;
  int layer_index = -1;  // position among quantizable layers, -1 for float-only projections
  Tensor2D weight{1, 1};  // out x in
  std::vector<double> bias;
};

struct LayerInfo {
  std::string id;
  LayerFamily family;
  int block;
  std::size_t in_channels;
  std::size_t out_channels;
};

/// Supplies the matmul of every quantizable linear. Implementations return
/// x * W^T; the model adds the bias.
class LinearExecutor {
 public:
  virtual ~LinearExecutor() = default;
  virtual Tensor2D linear(const Linear& layer, int step, const Tensor2D& x) = 0;
  /// Step count the executor was prepared for, if it depends on one.
  virtual std::optional<int> expected_steps() const { return std::nullopt; }
};

class FloatExecutor final : public LinearExecutor {
 public:
  Tensor2D linear(const Linear& layer, int step, const Tensor2D& x) override;
};

struct LatentVideo {
  int frames;
  int spatial_tokens;
  Tensor2D data;  // (frames * spatial_tokens) x d_model

  friend bool operator==(const LatentVideo&, const LatentVideo&) = default;
};

struct DiffusionSchedule {
  int steps = 20;
  double cfg_scale = 7.0;
  std::vector<int> timesteps;     // per step, descending; step 0 is the noisiest
  std::vector<double> alpha_bar;  // cumulative signal level per step, strictly increasing

  /// Linear-beta DDPM schedule over `train_steps`, respaced evenly to `steps`.
  static DiffusionSchedule ddpm(int steps = 20, double cfg_scale = 7.0, int train_steps = 1000);

  double alpha_bar_prev(int step) const;
};

/// Per-channel standard deviation of the synthetic clean latents: a smooth
/// drift across channels with a few outlier channels.
std::vector<double> channel_scale_profile(int d_model);

class ToyModel {
 public:
  const ToyModelConfig& config() const noexcept { return config_; }
  const std::vector<LayerInfo>& layers() const noexcept { return layers_; }
  const Linear& layer(std::size_t index) const;
  std::optional<std::size_t> find_layer(std::string_view id) const;

  /// Prompt tokens (context_tokens x d_model) for a conditioning vector.
  Tensor2D context(std::span<const double> cond) const;
  Tensor2D null_context() const;

  /// Noise prediction for latent tokens x_t at schedule step `step`.
  Tensor2D predict_noise(const Tensor2D& x_t, const DiffusionSchedule& schedule, int step,
                         const Tensor2D& context, LinearExecutor& executor) const;

  /// Normalised final hidden state, the input of the output head.
  Tensor2D head_features(const Tensor2D& x_t, const DiffusionSchedule& schedule, int step,
                         const Tensor2D& context, LinearExecutor& executor) const;

 private:
  friend ToyModel build_model(const ToyModelConfig& config);

  struct Block {
    std::vector<double> norm_gain;  // 4 x d_model, one gain vector per sublayer
    Linear modulation;              // timestep embedding -> shift and scale per sublayer
    Linear spatial_q, spatial_k, spatial_v, spatial_out;
    Linear temporal_q, temporal_k, temporal_v, temporal_out;
    Linear cross_q, cross_k, cross_v, cross_out;
    Linear ff_in, ff_out;
  };

  Tensor2D hidden(const Tensor2D& x_t, double timestep, int step, const Tensor2D& context,
                  LinearExecutor& executor) const;
  std::vector<double> timestep_embedding(double timestep) const;

  ToyModelConfig config_;
  Linear x_embed_;
  Linear t_embed_;
  Linear cond_proj_;
  Linear head_;
  std::vector<Block> blocks_;
  std::vector<const Linear*> quantizable_;
  std::vector<LayerInfo> layers_;
  std::vector<double> prior_variance_;  // sigma_c^2 of the Gaussian prior
};

/// Deterministic seeded initialisation. With config.fit_output_head the
/// output head is refit by ridge regression on noised synthetic latents.
ToyModel build_model(const ToyModelConfig& config);

/// Runs every schedule step with classifier-free guidance,
/// eps = uncond + cfg_scale * (cond - uncond), and returns the final latent.
/// The unconditional branch is evaluated first at every step.
LatentVideo denoise(const ToyModel& model, const DiffusionSchedule& schedule, std::span<const double> cond,
                    std::uint64_t seed, LinearExecutor& executor);

struct SynthSample {
  LatentVideo latent;         // clean latent drawn with channel_scale_profile
  std::vector<double> cond;   // conditioning vector
  std::uint64_t seed;         // noise seed used when this sample drives a denoise run
};

std::vector<SynthSample> synth_dataset(int n, std::uint64_t seed, const ToyModelConfig& config);

}  // namespace stq::toy
