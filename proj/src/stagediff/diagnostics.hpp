// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stagediff/data.hpp"
#include "stagediff/networks.hpp"
#include "stagediff/schedule.hpp"

namespace stagediff {

enum class ProfileTarget { kNoise, kMask };
const char* target_name(ProfileTarget t);
ProfileTarget target_from_name(const std::string& name);

struct ProfileConfig {
  ProfileTarget target = ProfileTarget::kNoise;
  int steps = 200;          // measured single-sample steps
  int bins = 10;
  int warmup_steps = 500;   // optimizer steps on the single-target loss before measuring
  int warmup_batch = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int fold = 0;
  int num_timesteps = 1000;
  BetaSpec beta;
};

struct AttentionProfile {
  ProfileTarget target = ProfileTarget::kNoise;
  std::vector<int> bin_lo, bin_hi;  // inclusive timestep ranges
  std::vector<double> grad_mean;    // mean global gradient L2 norm per bin
  std::vector<int> counts;
  std::vector<bool> empty;          // bins that received no step
  int warmup_steps = 0;
  std::uint64_t seed = 0;

  // Mean of grad_mean over bins entirely inside [lo, hi].
  double group_mean(int lo, int hi) const;
};

// Warms up a fresh DNet on the single-target loss with uniform timesteps,
// then records per-step gradient norms without updating. Step k measures a
// timestep drawn uniformly inside bin (k mod bins).
AttentionProfile profile_gradients(const Dataset& data, const Cfenet& cfenet, const ProfileConfig& cfg);

void export_profile(const AttentionProfile& p, const std::string& path);
AttentionProfile import_profile(const std::string& path);

}  // namespace stagediff
