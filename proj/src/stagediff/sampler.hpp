// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagediff/networks.hpp"
#include "stagediff/schedule.hpp"

namespace stagediff {

// Both branch estimates in the diffusion domain. x0_hat is already squashed
// into [-1, 1].
struct DualEstimate {
  Field eps_hat;
  Field x0_hat;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  // Called once per image before any predict().
  virtual void condition(std::span<const float> image) = 0;
  virtual DualEstimate predict(std::span<const double> x_t, int t) = 0;
  virtual int side() const = 0;

  int network_calls() const { return network_calls_; }
  int feature_calls() const { return feature_calls_; }

 protected:
  int network_calls_ = 0;
  int feature_calls_ = 0;
};

// Frozen CFENet features are computed in condition() and reused.
class NetworkDenoiser final : public Denoiser {
 public:
  NetworkDenoiser(const Cfenet& cfenet, const Dnet& dnet);
  void condition(std::span<const float> image) override;
  DualEstimate predict(std::span<const double> x_t, int t) override;
  int side() const override { return dnet_->config().input_side; }

 private:
  const Cfenet* cfenet_;
  const Dnet* dnet_;
  ConditionalFeatures cond_;
};

// Returns the exact (x0, eps) pair consistent with the queried state.
class OracleDenoiser final : public Denoiser {
 public:
  OracleDenoiser(Field x0_true, const NoiseSchedule& sched, int side);
  void condition(std::span<const float>) override { ++feature_calls_; }
  DualEstimate predict(std::span<const double> x_t, int t) override;
  int side() const override { return side_; }

 private:
  Field x0_;
  const NoiseSchedule* sched_;
  int side_;
};

struct SamplerConfig {
  int t_start = 999;
  int t_mid_high = 599;
  int t_mid_low = 299;
  int ddim_interval = 30;
  int fanout_per_branch = 10;
  double eta_refine = 1.0;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& sched) const;
  int trunk_steps() const { return (t_mid_high - t_mid_low) / ddim_interval; }
};

enum class Trunk { kMask = 0, kNoise = 1 };
const char* trunk_name(Trunk t);

struct MaskProvenance {
  Trunk trunk = Trunk::kMask;
  int refinement_index = 0;
  std::uint64_t seed = 0;
};

struct EnsembleOutput {
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<Field> finals;  // diffusion-domain x_0 before thresholding
  std::vector<MaskProvenance> provenance;
  Field x_start, x_mid_high;
  Field trunk_mask, trunk_noise;  // states at t_mid_low
  std::vector<int> trunk_timesteps;
  int network_calls = 0;
};

// `x_start` overrides the Gaussian start state.
EnsembleOutput staged_sample(std::span<const float> image, Denoiser& denoiser, const NoiseSchedule& sched,
                             const SamplerConfig& cfg, std::optional<Field> x_start = std::nullopt);

struct EvaluationCount {
  int trunk = 0;
  int total = 0;
};
EvaluationCount count_network_evaluations(const SamplerConfig& cfg);

enum class Branch { kNoise, kMask };

// Baseline samplers for the ablation rows. uniform_ddim_sample runs `steps`
// deterministic DDIM steps from t_start down to the clean sample;
// one_step_sample takes a single jump from t_start.
std::vector<std::uint8_t> uniform_ddim_sample(std::span<const float> image, Denoiser& denoiser,
                                              const NoiseSchedule& sched, Branch branch, int steps, std::uint64_t seed);
std::vector<std::uint8_t> one_step_sample(std::span<const float> image, Denoiser& denoiser, const NoiseSchedule& sched,
                                          Branch branch, std::uint64_t seed);

// Estimates driving a DDIM step from the chosen branch. The noise branch's x0
// estimate is clipped to [-1, 1]; the mask branch derives eps from its x0.
DualEstimate branch_estimate(const DualEstimate& raw, std::span<const double> x_t, int t, Branch branch,
                             const NoiseSchedule& sched);

}  // namespace stagediff
