// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "stagediff/error.hpp"
#include "stagediff/stage_policy.hpp"

using namespace stagediff;

TEST_SUITE("stage_policy") {
  TEST_CASE("boundaries and remapping") {
    const StagePolicy p;
    CHECK(stage_of(999, p) == Stage::kRapidSegmentation);
    CHECK(stage_of(600, p) == Stage::kRapidSegmentation);
    CHECK(stage_of(599, p) == Stage::kProbabilisticModeling);
    CHECK(stage_of(300, p) == Stage::kProbabilisticModeling);
    CHECK(stage_of(299, p) == Stage::kDenoisingRefinement);
    CHECK(stage_of(0, p) == Stage::kDenoisingRefinement);
    CHECK(remap_training_timestep(750, p) == 999);
    CHECK(remap_training_timestep(450, p) == 450);
    CHECK(remap_training_timestep(120, p) == 0);
  }

  TEST_CASE("weights per stage") {
    const StagePolicy p;
    const LossWeights r = loss_weights(Stage::kRapidSegmentation, p);
    const LossWeights m = loss_weights(Stage::kProbabilisticModeling, p);
    const LossWeights d = loss_weights(Stage::kDenoisingRefinement, p);
    CHECK(r.alpha == 1.0);
    CHECK(r.beta == 3.0);
    CHECK(m.alpha == 1.0);
    CHECK(m.beta == 1.0);
    CHECK(d.alpha == 3.0);
    CHECK(d.beta == 1.0);
  }

  TEST_CASE("json round trip and validation") {
    StagePolicy p;
    p.high_threshold = 649;
    p.low_threshold = 199;
    nlohmann::json j = p;
    const StagePolicy q = j.get<StagePolicy>();
    CHECK(q.high_threshold == 649);
    CHECK(q.low_threshold == 199);
    StagePolicy bad;
    bad.low_threshold = 700;
    CHECK_THROWS_AS(bad.validate(), Error);
  }

  TEST_CASE("stage names") {
    for (Stage s : {Stage::kRapidSegmentation, Stage::kProbabilisticModeling, Stage::kDenoisingRefinement})
      CHECK(stage_from_name(stage_name(s)) == s);
    CHECK_THROWS_AS(stage_from_name("warp"), Error);
  }
}
