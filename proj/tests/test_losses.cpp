// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "stagediff/error.hpp"
#include "stagediff/losses.hpp"
#include "stagediff/random.hpp"

using namespace stagediff;

TEST_SUITE("losses_metrics") {
  TEST_CASE("noise loss is the mean squared error") {
    const std::vector<double> a{1, 2, 3, 4}, b{1, 0, 3, 8};
    CHECK(noise_loss(a, b) == doctest::Approx((0 + 4 + 0 + 16) / 4.0));
    CHECK_THROWS_AS(noise_loss(a, std::vector<double>{1}), Error);
  }

  TEST_CASE("dice and cross-entropy against direct formulas") {
    Rng rng(2);
    std::vector<double> z(50), g(50);
    for (auto& v : z) v = 4 * rng.normal();
    for (auto& v : g) v = rng.uniform() < 0.3 ? 1 : 0;
    double inter = 0, sp = 0, sg = 0, ce = 0;
    for (int i = 0; i < 50; ++i) {
      const double p = 1 / (1 + std::exp(-z[i]));
      inter += p * g[i];
      sp += p;
      sg += g[i];
      ce += -(g[i] * std::log(p) + (1 - g[i]) * std::log(1 - p));
    }
    const DiceCe r = dice_ce_loss(z, g);
    CHECK(r.l_dice == doctest::Approx(1 - (2 * inter + 1) / (sp + sg + 1)).epsilon(1e-12));
    CHECK(r.l_ce == doctest::Approx(ce / 50).epsilon(1e-10));
  }

  TEST_CASE("cross-entropy stays finite for saturated logits") {
    const DiceCe r = dice_ce_loss(std::vector<double>{800, -800}, std::vector<double>{0, 1});
    CHECK(std::isfinite(r.l_ce));
    CHECK(r.l_ce == doctest::Approx(800));
  }

  TEST_CASE("combine applies the stage weights") {
    const StagePolicy p;
    const LossBreakdown r = combine(2, 0.5, 0.25, Stage::kRapidSegmentation, p);
    CHECK(r.total == doctest::Approx(1 * 2 + 3 * 0.75));
    const LossBreakdown d = combine(2, 0.5, 0.25, Stage::kDenoisingRefinement, p);
    CHECK(d.total == doctest::Approx(3 * 2 + 1 * 0.75));
  }

  TEST_CASE("weighted dual loss equals the per-sample scalar sum") {
    Rng rng(4);
    const int n = 3, px = 25;
    std::vector<real> eh(n * px), lg(n * px), eps(n * px), mask(n * px);
    for (int i = 0; i < n * px; ++i) {
      eh[i] = static_cast<real>(rng.normal());
      lg[i] = static_cast<real>(2 * rng.normal());
      eps[i] = static_cast<real>(rng.normal());
      mask[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    const std::vector<LossWeights> w{{1, 3}, {1, 1}, {3, 1}};
    std::vector<LossBreakdown> parts;
    const Var l = weighted_dual_loss(Var::constant({n, 1, 5, 5}, eh), Var::constant({n, 1, 5, 5}, lg), eps, mask, w,
                                     &parts);
    double want = 0;
    for (int s = 0; s < n; ++s) {
      std::vector<double> a(eh.begin() + s * px, eh.begin() + (s + 1) * px),
          b(eps.begin() + s * px, eps.begin() + (s + 1) * px), z(lg.begin() + s * px, lg.begin() + (s + 1) * px),
          g(mask.begin() + s * px, mask.begin() + (s + 1) * px);
      const double ln = noise_loss(a, b);
      const DiceCe dc = dice_ce_loss(z, g);
      CHECK(parts[s].l_noise == doctest::Approx(ln).epsilon(1e-5));
      CHECK(parts[s].l_dice == doctest::Approx(dc.l_dice).epsilon(1e-5));
      CHECK(parts[s].l_ce == doctest::Approx(dc.l_ce).epsilon(1e-5));
      want += w[s].alpha * ln + w[s].beta * (dc.l_dice + dc.l_ce);
    }
    CHECK(l.item() == doctest::Approx(want / n).epsilon(1e-5));
  }

  TEST_CASE("dice and iou against the oracle") {
    Rng rng(6);
    for (int rep = 0; rep < 100; ++rep) {
      std::vector<std::uint8_t> a(64), b(64);
      const double pa = rng.uniform(), pb = rng.uniform();
      for (auto& v : a) v = rng.uniform() < pa;
      for (auto& v : b) v = rng.uniform() < pb;
      const DiceIou r = dice_iou(a, b);
      CHECK(r.dice == doctest::Approx(oracle::dice(a, b)).epsilon(1e-12));
      CHECK(r.iou == doctest::Approx(oracle::iou(a, b)).epsilon(1e-12));
    }
  }

  TEST_CASE("metric conventions") {
    const std::vector<std::uint8_t> e(9, 0), full(9, 1), half{1, 1, 1, 1, 0, 0, 0, 0, 0};
    const DiceIou both = dice_iou(e, e);
    CHECK(both.dice == 1.0);
    CHECK(both.iou == 1.0);
    CHECK(both.both_empty);
    CHECK(dice_iou(full, full).dice == 1.0);
    const std::vector<std::uint8_t> other{0, 0, 0, 0, 1, 1, 1, 1, 1};
    CHECK(dice_iou(half, other).dice == 0.0);
    CHECK(dice_iou(half, other).iou == 0.0);
    CHECK(dice_iou(e, half).dice == 0.0);
    CHECK_THROWS_AS(dice_iou(e, std::vector<std::uint8_t>(3)), Error);
  }

  TEST_CASE("summary policies") {
    const std::vector<DiceIou> s{{1, 1, true}, {0.5, 0.25, false}, {0.7, 0.5, false}};
    const MetricSummary one = summarize(s, EmptyPolicy::kScoreOne);
    CHECK(one.counted == 3);
    CHECK(one.mdice == doctest::Approx(2.2 / 3));
    const MetricSummary ex = summarize(s, EmptyPolicy::kExclude);
    CHECK(ex.counted == 2);
    CHECK(ex.excluded == 1);
    CHECK(ex.mdice == doctest::Approx(0.6));
    CHECK(ex.miou == doctest::Approx(0.375));
  }
}
