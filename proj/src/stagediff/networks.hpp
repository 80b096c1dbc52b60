// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Conditional feature extractor (a full UNet), the dual-decoder denoiser
// (one shared encoder, separate noise and mask decoders) and the dual
// cross-attention fusion used to inject conditional features.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagediff/layers.hpp"
#include "stagediff/schedule.hpp"

namespace stagediff {

inline constexpr int kLevels = 5;

struct NetworkConfig {
  int input_side = 64;
  int in_channels = 1;
  std::array<int, kLevels> widths{32, 64, 128, 256, 256};
  std::array<bool, kLevels> dca_levels{false, false, true, true, true};
  bool use_dca = true;
  int heads = 4;
  int time_dim = 64;

  void validate() const;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

// CF_1..CF_5, finest first; level i has side input_side / 2^i and widths[i] channels.
struct ConditionalFeatures {
  std::array<Var, kLevels> cf;
};

struct CfenetOutput {
  ConditionalFeatures features;
  Var seg_logits;  // [N,1,S,S]
};

class Cfenet {
 public:
  Cfenet(const NetworkConfig& cfg, std::uint64_t seed);

  // image [N, in_channels, S, S] in [-1,1].
  CfenetOutput forward(const Var& image) const;

  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }
  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  nn::ParamList params_;
  bool frozen_ = false;
  nn::Conv2d stem_;
  std::array<nn::ResBlock, kLevels> enc_;
  std::array<nn::Conv2d, kLevels - 1> down_;
  nn::ResBlock mid_;
  std::array<nn::ResBlock, kLevels - 1> dec_;
  nn::GroupNorm head_norm_;
  nn::Conv2d head_;
};

// Two cascaded cross-attention blocks. Block 1 attends from the denoising
// features to the conditional features; block 2 attends from the conditional
// features to the block-1 output. Each block is residual on the running
// denoising stream, so the output has the denoising feature shape.
struct DualCrossAttention {
  nn::CrossAttention first, second;

  static DualCrossAttention make(const nn::ParamBuilder& pb, int channels, int heads);
  // When non-null, the attention weights of each block are written out.
  Var operator()(const Var& cond_feat, const Var& denoise_feat, std::vector<real>* first_weights = nullptr,
                 std::vector<real>* second_weights = nullptr) const;
};

Var dca_fuse(const Var& cond_feat, const Var& denoise_feat, const DualCrossAttention& params);

struct DnetOutput {
  Var eps_hat;    // [N,1,S,S]
  Var x0_logits;  // [N,1,S,S]; diffusion-domain estimate is tanh(logits)
};

class Dnet {
 public:
  Dnet(const NetworkConfig& cfg, std::uint64_t seed);

  // x_t [N,1,S,S]; one timestep per sample.
  DnetOutput forward(const Var& x_t, const std::vector<int>& timesteps, const ConditionalFeatures& cond) const;

  nn::ParamList& params() { return params_; }
  const nn::ParamList& params() const { return params_; }
  const NetworkConfig& config() const { return cfg_; }

 private:
  struct Decoder {
    nn::ResBlock mid;
    std::array<nn::ResBlock, kLevels - 1> up;
    nn::GroupNorm out_norm;
    nn::Conv2d out;
  };
  Decoder make_decoder(const nn::ParamBuilder& pb) const;
  Var run_decoder(const Decoder& d, const std::array<Var, kLevels>& skips, const Var& temb) const;

  NetworkConfig cfg_;
  nn::ParamList params_;
  nn::Linear time_fc1_, time_fc2_;
  nn::Conv2d stem_;
  std::array<nn::ResBlock, kLevels> enc_;
  std::array<nn::Conv2d, kLevels> cond_proj_;
  std::array<DualCrossAttention, kLevels> dca_;
  std::array<nn::Conv2d, kLevels - 1> down_;
  Decoder noise_dec_, mask_dec_;
};

std::size_t parameter_count(const nn::ParamList& params);
// SHA-256 over parameter names and float32 values, hex encoded.
std::string parameter_checksum(const nn::ParamList& params);

// Converts a batch of per-sample fields into an [N,1,S,S] constant.
Var batch_field(const std::vector<const Field*>& fields, int side);

}  // namespace stagediff
