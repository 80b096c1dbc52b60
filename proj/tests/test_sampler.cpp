// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "stagediff/error.hpp"
#include "stagediff/random.hpp"
#include "stagediff/sampler.hpp"
#include "tiny.hpp"

using namespace stagediff;

namespace {

Field disk_field(int side) {
  const auto m = oracle::disk(side, side / 4.0);
  const std::vector<float> f(m.begin(), m.end());
  return to_diffusion_domain(f);
}

}  // namespace

TEST_SUITE("sampler") {
  TEST_CASE("default structure") {
    const NoiseSchedule s = build_schedule(1000);
    const int side = 16;
    const Field x0 = disk_field(side);
    OracleDenoiser den(x0, s, side);
    const std::vector<float> image(side * side, 0.0f);
    const EnsembleOutput out = staged_sample(image, den, s, SamplerConfig{});
    CHECK(out.masks.size() == 20);
    int mask_tagged = 0;
    for (const auto& p : out.provenance) mask_tagged += p.trunk == Trunk::kMask;
    CHECK(mask_tagged == 10);
    std::vector<int> want;
    for (int t = 599; t >= 299; t -= 30) want.push_back(t);
    CHECK(out.trunk_timesteps == want);
    CHECK(out.network_calls == 41);
    CHECK(den.feature_calls() == 1);
    const EvaluationCount c = count_network_evaluations(SamplerConfig{});
    CHECK(c.trunk == 11);
    CHECK(c.total == 41);
    SamplerConfig one;
    one.fanout_per_branch = 1;
    CHECK(count_network_evaluations(one).total == 23);
  }

  TEST_CASE("oracle trunks land on the forward kernel") {
    const NoiseSchedule s = build_schedule(1000);
    const int side = 16;
    const Field x0 = disk_field(side);
    Rng rng(3);
    const Field eps = rng.normal_vector(side * side);
    // Start from the forward state at 999 so the trajectory is consistent.
    const NoisySample start = add_noise(x0, 999, eps, s);
    OracleDenoiser den(x0, s, side);
    const std::vector<float> image(side * side, 0.0f);
    const EnsembleOutput out = staged_sample(image, den, s, SamplerConfig{}, start.x_t);
    const NoisySample want = add_noise(x0, 299, eps, s);
    for (int i = 0; i < side * side; ++i) {
      CHECK(std::abs(out.trunk_mask[i] - want.x_t[i]) < 1e-5);
      CHECK(std::abs(out.trunk_noise[i] - want.x_t[i]) < 1e-5);
    }
    const auto gt = from_diffusion_domain(x0);
    for (const auto& m : out.masks) CHECK(std::vector<unsigned char>(m.begin(), m.end()) == gt);
    // Refinement noise is of the injected size around x0.
    const double sigma = std::sqrt((1 - s.alpha_bar(0)) / (1 - s.alpha_bar(299))) *
                         std::sqrt(1 - s.alpha_bar(299) / s.alpha_bar(0));
    for (const auto& f : out.finals)
      for (int i = 0; i < side * side; ++i) CHECK(std::abs(f[i] - x0[i]) < 6 * sigma + 1e-3);
  }

  TEST_CASE("seeded determinism and deterministic fanout") {
    const NoiseSchedule s = build_schedule(1000);
    const Field x0 = disk_field(16);
    const std::vector<float> image(256, 0.0f);
    SamplerConfig cfg;
    cfg.seed = 17;
    OracleDenoiser a(x0, s, 16), b(x0, s, 16);
    const EnsembleOutput r1 = staged_sample(image, a, s, cfg), r2 = staged_sample(image, b, s, cfg);
    CHECK(r1.finals == r2.finals);
    cfg.fanout_per_branch = 1;
    cfg.eta_refine = 0;
    OracleDenoiser c(x0, s, 16), d(x0, s, 16);
    CHECK(staged_sample(image, c, s, cfg).finals == staged_sample(image, d, s, cfg).finals);
  }

  TEST_CASE("trained network yields a diverse ensemble with one feature pass") {
    const Dataset data = generate_synthetic(tiny::synth());
    Cfenet cf(tiny::network(), 1);
    cf.set_frozen(true);
    Dnet dn(tiny::network(), 2);
    // Perturb the zero-initialized heads so outputs depend on the input.
    Rng rng(5);
    for (auto& [name, p] : dn.params())
      for (auto& v : p.mutable_data()) v += static_cast<real>(0.2 * rng.normal());
    NetworkDenoiser den(cf, dn);
    const EnsembleOutput out = staged_sample(data.records[0].image, den, build_schedule(1000), SamplerConfig{});
    CHECK(den.feature_calls() == 1);
    CHECK(den.network_calls() == 41);
    std::set<std::vector<std::uint8_t>> distinct(out.masks.begin(), out.masks.end());
    CHECK(distinct.size() >= 2);
  }

  TEST_CASE("config invariants") {
    const NoiseSchedule s = build_schedule(1000);
    SamplerConfig c;
    c.ddim_interval = 40;
    CHECK_THROWS_AS(c.validate(s), Error);
    c = {};
    c.t_mid_low = 650;
    CHECK_THROWS_AS(c.validate(s), Error);
    c = {};
    c.fanout_per_branch = 0;
    CHECK_THROWS_AS(c.validate(s), Error);
    c = {};
    c.t_start = 1000;
    CHECK_THROWS_AS(c.validate(s), Error);
  }

  TEST_CASE("baselines with an oracle recover the mask") {
    const NoiseSchedule s = build_schedule(1000);
    const Field x0 = disk_field(16);
    const auto gt = from_diffusion_domain(x0);
    const std::vector<float> image(256, 0.0f);
    for (Branch br : {Branch::kNoise, Branch::kMask}) {
      OracleDenoiser a(x0, s, 16);
      const auto u = uniform_ddim_sample(image, a, s, br, 100, 1);
      CHECK(std::vector<unsigned char>(u.begin(), u.end()) == gt);
      CHECK(a.network_calls() == 100);
      OracleDenoiser b(x0, s, 16);
      const auto o = one_step_sample(image, b, s, br, 1);
      CHECK(std::vector<unsigned char>(o.begin(), o.end()) == gt);
      CHECK(b.network_calls() == 1);
    }
  }

  TEST_CASE("non-finite states abort with the step") {
    const NoiseSchedule s = build_schedule(1000);
    Field x0(256, std::nan(""));
    OracleDenoiser den(x0, s, 16);
    const std::vector<float> image(256, 0.0f);
    CHECK_THROWS_AS(staged_sample(image, den, s, SamplerConfig{}), Error);
  }
}
