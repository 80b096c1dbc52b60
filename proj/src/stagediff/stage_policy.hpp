// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>

#include "json.hpp"

namespace stagediff {

// Ordered by timestep range: Rapid covers the noisiest steps.
enum class Stage : int { kDenoisingRefinement = 0, kProbabilisticModeling = 1, kRapidSegmentation = 2 };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct LossWeights {
  double alpha = 1.0;  // noise term
  double beta = 1.0;   // mask term
};

struct StagePolicy {
  int num_timesteps = 1000;
  int high_threshold = 599;  // t > high -> Rapid
  int low_threshold = 299;   // t <= low -> Refinement
  int clamp_high = 999;
  int clamp_low = 0;
  // Indexed by Stage.
  std::array<LossWeights, 3> weights{{{3.0, 1.0}, {1.0, 1.0}, {1.0, 3.0}}};

  void validate() const;
};

Stage stage_of(int t, const StagePolicy& policy);
int remap_training_timestep(int t_raw, const StagePolicy& policy);
LossWeights loss_weights(Stage stage, const StagePolicy& policy);

void to_json(nlohmann::json& j, const StagePolicy& p);
void from_json(const nlohmann::json& j, StagePolicy& p);

}  // namespace stagediff
