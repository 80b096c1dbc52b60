// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/stage_policy.hpp"

#include "stagediff/error.hpp"

namespace stagediff {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kRapidSegmentation: return "rapid_segmentation";
    case Stage::kProbabilisticModeling: return "probabilistic_modeling";
    case Stage::kDenoisingRefinement: return "denoising_refinement";
  }
  return "unknown";
}

Stage stage_from_name(const std::string& name) {
  for (Stage s : {Stage::kRapidSegmentation, Stage::kProbabilisticModeling, Stage::kDenoisingRefinement})
    if (name == stage_name(s)) return s;
  fail(ErrorCode::kInvalidArgument, "unknown stage '" + name + "'");
}

void StagePolicy::validate() const {
  check(0 <= low_threshold && low_threshold < high_threshold && high_threshold < num_timesteps,
        ErrorCode::kInvalidArgument,
        "stage policy needs 0 <= low_threshold < high_threshold < T (got low=" + std::to_string(low_threshold) +
            ", high=" + std::to_string(high_threshold) + ", T=" + std::to_string(num_timesteps) + ")");
  check(clamp_high > high_threshold && clamp_high < num_timesteps, ErrorCode::kInvalidArgument,
        "stage policy clamp_high must lie in the rapid stage");
  check(clamp_low >= 0 && clamp_low <= low_threshold, ErrorCode::kInvalidArgument,
        "stage policy clamp_low must lie in the refinement stage");
  for (const auto& w : weights)
    check(w.alpha > 0 && w.beta > 0, ErrorCode::kInvalidArgument, "stage policy loss weights must be strictly positive");
}

Stage stage_of(int t, const StagePolicy& policy) {
  check(t >= 0 && t < policy.num_timesteps, ErrorCode::kOutOfRange, "timestep " + std::to_string(t) + " out of range");
  if (t > policy.high_threshold) return Stage::kRapidSegmentation;
  if (t > policy.low_threshold) return Stage::kProbabilisticModeling;
  return Stage::kDenoisingRefinement;
}

int remap_training_timestep(int t_raw, const StagePolicy& policy) {
  switch (stage_of(t_raw, policy)) {
    case Stage::kRapidSegmentation: return policy.clamp_high;
    case Stage::kDenoisingRefinement: return policy.clamp_low;
    case Stage::kProbabilisticModeling: break;
  }
  return t_raw;
}

LossWeights loss_weights(Stage stage, const StagePolicy& policy) {
  return policy.weights[static_cast<std::size_t>(stage)];
}

void to_json(nlohmann::json& j, const StagePolicy& p) {
  auto w = [](const LossWeights& lw) { return nlohmann::json::array({lw.alpha, lw.beta}); };
  j = nlohmann::json{{"num_timesteps", p.num_timesteps},
                     {"high_threshold", p.high_threshold},
                     {"low_threshold", p.low_threshold},
                     {"clamp_high", p.clamp_high},
                     {"clamp_low", p.clamp_low},
                     {"weights",
                      {{stage_name(Stage::kRapidSegmentation), w(p.weights[2])},
                       {stage_name(Stage::kProbabilisticModeling), w(p.weights[1])},
                       {stage_name(Stage::kDenoisingRefinement), w(p.weights[0])}}}};
}

void from_json(const nlohmann::json& j, StagePolicy& p) {
  StagePolicy d;
  p.num_timesteps = j.value("num_timesteps", d.num_timesteps);
  p.high_threshold = j.value("high_threshold", d.high_threshold);
  p.low_threshold = j.value("low_threshold", d.low_threshold);
  p.clamp_high = j.value("clamp_high", p.num_timesteps - 1);
  p.clamp_low = j.value("clamp_low", d.clamp_low);
  p.weights = d.weights;
  if (j.contains("weights")) {
    for (const auto& [name, pair] : j.at("weights").items()) {
      auto s = static_cast<std::size_t>(stage_from_name(name));
      p.weights[s] = {pair.at(0).get<double>(), pair.at(1).get<double>()};
    }
  }
}

}  // namespace stagediff
