// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "stagediff/error.hpp"
#include "stagediff/random.hpp"
#include "stagediff/schedule.hpp"

using namespace stagediff;

TEST_SUITE("schedule") {
  TEST_CASE("cumulative product matches a direct loop") {
    const NoiseSchedule s = build_schedule(1000);
    REQUIRE(s.betas.size() == 1000);
    CHECK(s.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-12));
    // Independent oracle: product of (1 - beta) computed as exp(sum log).
    double logsum = 0;
    for (int t = 0; t < 1000; ++t) {
      const double beta = 1e-4 + (0.02 - 1e-4) * t / 999.0;
      logsum += std::log1p(-beta);
      CHECK(s.alpha_bar(t) == doctest::Approx(std::exp(logsum)).epsilon(1e-12));
    }
    for (int t = 1; t < 1000; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  }

  TEST_CASE("add_noise matches the closed form and inverts") {
    const NoiseSchedule s = build_schedule(1000);
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
      const int t = rng.uniform_int(0, 999);
      const Field x0 = rng.normal_vector(64), eps = rng.normal_vector(64);
      const NoisySample n = add_noise(x0, t, eps, s);
      const double ab = s.alpha_bar(t);
      for (int i = 0; i < 64; ++i)
        CHECK(n.x_t[i] == doctest::Approx(std::sqrt(ab) * x0[i] + std::sqrt(1 - ab) * eps[i]).epsilon(1e-12));
      const Field x0r = x0_from_eps(n.x_t, eps, t, s);
      const Field epsr = eps_from_x0(n.x_t, x0, t, s);
      for (int i = 0; i < 64; ++i) {
        CHECK(std::abs(x0r[i] - x0[i]) < 1e-9);
        CHECK(std::abs(epsr[i] - eps[i]) < 1e-9);
      }
    }
  }

  TEST_CASE("deterministic DDIM with exact estimates lands on the forward kernel") {
    const NoiseSchedule s = build_schedule(1000);
    Rng rng(11);
    const Field x0 = rng.normal_vector(32), eps = rng.normal_vector(32);
    const NoisySample a = add_noise(x0, 700, eps, s);
    const Field next = ddim_step(a.x_t, x0, eps, 700, 400, s, 0.0, nullptr);
    const NoisySample b = add_noise(x0, 400, eps, s);
    for (int i = 0; i < 32; ++i) CHECK(std::abs(next[i] - b.x_t[i]) < 1e-12);
    // t_next == 0 lands on the forward state at index 0.
    const Field last = ddim_step(a.x_t, x0, eps, 700, 0, s, 0.0, nullptr);
    for (int i = 0; i < 32; ++i) CHECK(std::abs(last[i] - x0[i]) < 1e-12);
  }

  TEST_CASE("sigma follows the DDIM formula") {
    const NoiseSchedule s = build_schedule(1000);
    const double at = s.alpha_bar(599), an = s.alpha_bar(299);
    const double want = std::sqrt((1 - an) / (1 - at)) * std::sqrt(1 - at / an);
    CHECK(ddim_sigma(599, 299, s, 1.0) == doctest::Approx(want).epsilon(1e-12));
    CHECK(ddim_sigma(599, 299, s, 0.5) == doctest::Approx(0.5 * want).epsilon(1e-12));
    CHECK(ddim_sigma(599, 299, s, 0.0) == 0.0);
  }

  TEST_CASE("mask domain mapping") {
    const std::vector<float> m{0, 1, 1, 0};
    const Field x = to_diffusion_domain(m);
    CHECK(x == Field{-1, 1, 1, -1});
    CHECK(from_diffusion_domain(Field{-0.2, 0.3, 0.0, 5}) == std::vector<unsigned char>{0, 1, 0, 1});
  }

  TEST_CASE("invalid schedules are rejected") {
    CHECK_THROWS_AS(build_schedule(0), Error);
    BetaSpec bad;
    bad.beta_start = 0.5;
    bad.beta_end = 0.1;
    CHECK_THROWS_AS(build_schedule(10, bad), Error);
    BetaSpec fam;
    fam.family = "cosine-ish";
    CHECK_THROWS_AS(build_schedule(10, fam), Error);
  }

  TEST_CASE("descriptor round trip") {
    const NoiseSchedule s = build_schedule(1000);
    const NoiseSchedule r = schedule_from_descriptor(schedule_descriptor(s));
    CHECK(r.num_timesteps == 1000);
    CHECK(r.alphas_cumprod == s.alphas_cumprod);
  }
}
