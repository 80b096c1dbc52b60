// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/fusion.hpp"

#include <algorithm>
#include <cmath>

#include "stagediff/error.hpp"

namespace stagediff {

namespace {

double clamp_rate(double r) { return std::clamp(r, kRateFloor, 1.0 - kRateFloor); }

void validate(const std::vector<BinaryMask>& masks) {
  check(!masks.empty(), ErrorCode::kInvalidArgument, "staple needs at least one mask");
  check(!masks[0].empty(), ErrorCode::kInvalidArgument, "staple masks are empty (no pixels)");
  for (std::size_t j = 1; j < masks.size(); ++j)
    check(masks[j].size() == masks[0].size(), ErrorCode::kShapeMismatch,
          "staple mask " + std::to_string(j) + " has " + std::to_string(masks[j].size()) + " pixels, expected " +
              std::to_string(masks[0].size()));
}

// log(exp(a) + exp(b)) without overflow.
double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

StapleState staple_init(const std::vector<BinaryMask>& masks, const StapleConfig& cfg) {
  validate(masks);
  check(cfg.prior > 0 && cfg.prior < 1, ErrorCode::kInvalidArgument, "staple prior must be in (0, 1)");
  check(cfg.iterations >= 1, ErrorCode::kInvalidArgument, "staple iterations must be >= 1");
  StapleState s;
  s.alphas.assign(masks.size(), cfg.alpha0);
  s.betas.assign(masks.size(), cfg.beta0);
  s.posterior.assign(masks[0].size(), cfg.prior);
  s.prior = cfg.prior;
  return s;
}

double e_step(const std::vector<BinaryMask>& masks, StapleState& state) {
  validate(masks);
  const std::size_t J = masks.size(), n = masks[0].size();
  check(state.alphas.size() == J && state.betas.size() == J, ErrorCode::kShapeMismatch,
        "staple state does not match the ensemble size");
  std::vector<double> la1(J), la0(J), lb1(J), lb0(J);
  for (std::size_t j = 0; j < J; ++j) {
    const double a = clamp_rate(state.alphas[j]), b = clamp_rate(state.betas[j]);
    la1[j] = std::log(a);
    la0[j] = std::log1p(-a);
    lb1[j] = std::log(b);
    lb0[j] = std::log1p(-b);
  }
  const double lp1 = std::log(state.prior), lp0 = std::log1p(-state.prior);
  state.posterior.resize(n);
  double ll = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double l1 = lp1, l0 = lp0;
    for (std::size_t j = 0; j < J; ++j) {
      if (masks[j][i]) {
        l1 += la1[j];
        l0 += lb1[j];
      } else {
        l1 += la0[j];
        l0 += lb0[j];
      }
    }
    const double lz = log_add(l1, l0);
    state.posterior[i] = std::exp(l1 - lz);
    ll += lz;
  }
  state.log_likelihood.push_back(ll);
  return ll;
}

void m_step(const std::vector<BinaryMask>& masks, StapleState& state) {
  validate(masks);
  const std::size_t J = masks.size(), n = masks[0].size();
  check(state.posterior.size() == n, ErrorCode::kShapeMismatch, "staple posterior size mismatch");
  double sw = 0, sv = 0;
  for (double w : state.posterior) {
    sw += w;
    sv += 1.0 - w;
  }
  for (std::size_t j = 0; j < J; ++j) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (masks[j][i]) {
        tp += state.posterior[i];
        fp += 1.0 - state.posterior[i];
      }
    if (sw > 0) state.alphas[j] = clamp_rate(tp / sw);
    if (sv > 0) state.betas[j] = clamp_rate(fp / sv);
  }
}

StapleResult staple_fuse(const std::vector<BinaryMask>& masks, const StapleConfig& cfg) {
  StapleResult r;
  r.state = staple_init(masks, cfg);
  for (int it = 0; it < cfg.iterations; ++it) {
    e_step(masks, r.state);
    m_step(masks, r.state);
    ++r.state.iterations;
  }
  // Final posterior under the last rates. Ties (w == 0.5) go to background.
  e_step(masks, r.state);
  r.consensus.resize(r.state.posterior.size());
  for (std::size_t i = 0; i < r.consensus.size(); ++i) r.consensus[i] = r.state.posterior[i] > 0.5 ? 1 : 0;
  return r;
}

BinaryMask binarize(const std::vector<double>& probs) {
  BinaryMask m(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) m[i] = probs[i] > 0.5 ? 1 : 0;
  return m;
}

}  // namespace stagediff
