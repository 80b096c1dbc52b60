// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stagediff/stage_policy.hpp"
#include "stagediff/tensor.hpp"

namespace stagediff {

inline constexpr double kDiceSmooth = 1.0;

struct LossBreakdown {
  double l_noise = 0;
  double l_dice = 0;
  double l_ce = 0;
  double total = 0;
  Stage stage = Stage::kProbabilisticModeling;
};

// Mean squared error over all elements.
double noise_loss(std::span<const double> eps_hat, std::span<const double> eps);

struct DiceCe {
  double l_dice = 0;
  double l_ce = 0;
};
// Soft Dice on sigmoid(logits) with smoothing kDiceSmooth, plus pixelwise
// binary cross-entropy. `mask` holds {0,1}.
DiceCe dice_ce_loss(std::span<const double> x0_logits, std::span<const double> mask);

LossBreakdown combine(double l_noise, double l_dice, double l_ce, Stage stage, const StagePolicy& policy);

// Differentiable versions used by the trainers. Per-sample Dice is averaged
// over the batch.
Var noise_loss_var(const Var& eps_hat, const std::vector<real>& eps);
Var dice_loss_var(const Var& logits, const std::vector<real>& mask);
Var ce_loss_var(const Var& logits, const std::vector<real>& mask);

// Per-sample weighted objective over a batch:
//   (1/N) sum_s alpha_s * L_n(s) + beta_s * (L_dice(s) + L_ce(s)).
// `per_sample`, when given, receives each sample's components; the stage
// field is left for the caller.
Var weighted_dual_loss(const Var& eps_hat, const Var& x0_logits, const std::vector<real>& eps,
                       const std::vector<real>& mask, const std::vector<LossWeights>& weights,
                       std::vector<LossBreakdown>* per_sample = nullptr);

struct DiceIou {
  double dice = 0;
  double iou = 0;
  bool both_empty = false;
};
// Binary masks (nonzero = foreground). Two empty masks score (1, 1).
DiceIou dice_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

enum class EmptyPolicy { kScoreOne, kExclude };

struct MetricSummary {
  double mdice = 0;
  double miou = 0;
  int counted = 0;
  int excluded = 0;
};
MetricSummary summarize(const std::vector<DiceIou>& scores, EmptyPolicy policy);

}  // namespace stagediff
