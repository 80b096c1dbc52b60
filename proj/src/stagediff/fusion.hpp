// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary STAPLE: EM estimate of a consensus mask and per-rater sensitivity
// (alpha) and false-positive rate (beta).

#pragma once

#include <cstdint>
#include <vector>

namespace stagediff {

using BinaryMask = std::vector<std::uint8_t>;

inline constexpr double kRateFloor = 1e-6;

struct StapleConfig {
  double alpha0 = 0.9;
  double beta0 = 0.1;
  double prior = 0.5;
  int iterations = 20;
};

struct StapleState {
  std::vector<double> alphas;
  std::vector<double> betas;
  std::vector<double> posterior;
  double prior = 0.5;
  int iterations = 0;
  // Observed-data log-likelihood evaluated with the rates used by each E-step.
  std::vector<double> log_likelihood;
};

StapleState staple_init(const std::vector<BinaryMask>& masks, const StapleConfig& cfg);

// Posterior P(y_i = 1 | z) per pixel, evaluated in log space with rates
// clamped to [kRateFloor, 1 - kRateFloor]. Returns the log-likelihood.
double e_step(const std::vector<BinaryMask>& masks, StapleState& state);

// Standard STAPLE M-step. A rater whose denominator vanishes keeps its
// previous rate.
void m_step(const std::vector<BinaryMask>& masks, StapleState& state);

struct StapleResult {
  BinaryMask consensus;
  StapleState state;
};
StapleResult staple_fuse(const std::vector<BinaryMask>& masks, const StapleConfig& cfg = {});

// Binarizes soft masks given in [0, 1]; exactly 0.5 maps to background.
BinaryMask binarize(const std::vector<double>& probs);

}  // namespace stagediff
