// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "stagediff/error.hpp"
#include "stagediff/random.hpp"

namespace stagediff {

namespace {

constexpr std::uint64_t kSamplerTag = 0x5a3b;

void check_finite(const Field& x, const std::string& where) {
  for (double v : x) check(std::isfinite(v), ErrorCode::kNumeric, "non-finite sampler state at " + where);
}

Field start_noise(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kSamplerTag, 0}));
  return rng.normal_vector(n);
}

std::vector<std::uint8_t> threshold(const Field& x) {
  std::vector<std::uint8_t> m(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) m[i] = x[i] > 0 ? 1 : 0;
  return m;
}

}  // namespace

NetworkDenoiser::NetworkDenoiser(const Cfenet& cfenet, const Dnet& dnet) : cfenet_(&cfenet), dnet_(&dnet) {
  check(cfenet.config().input_side == dnet.config().input_side, ErrorCode::kShapeMismatch,
        "CFENet and DNet resolutions differ");
}

void NetworkDenoiser::condition(std::span<const float> image) {
  const int s = side(), c = cfenet_->config().in_channels;
  check(image.size() == static_cast<std::size_t>(c) * s * s, ErrorCode::kShapeMismatch,
        "image size does not match the network resolution");
  Var x = Var::constant({1, c, s, s}, std::vector<real>(image.begin(), image.end()));
  cond_ = cfenet_->forward(x).features;
  for (auto& f : cond_.cf) f = f.detach();
  ++feature_calls_;
}

DualEstimate NetworkDenoiser::predict(std::span<const double> x_t, int t) {
  check(cond_.cf[0].defined(), ErrorCode::kState, "denoiser used before condition()");
  const int s = side();
  check(x_t.size() == static_cast<std::size_t>(s) * s, ErrorCode::kShapeMismatch, "x_t size mismatch");
  Var x = Var::constant({1, 1, s, s}, std::vector<real>(x_t.begin(), x_t.end()));
  const DnetOutput o = dnet_->forward(x, {t}, cond_);
  ++network_calls_;
  DualEstimate e;
  e.eps_hat.assign(o.eps_hat.data().begin(), o.eps_hat.data().end());
  e.x0_hat.resize(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) e.x0_hat[i] = std::tanh(static_cast<double>(o.x0_logits.data()[i]));
  return e;
}

OracleDenoiser::OracleDenoiser(Field x0_true, const NoiseSchedule& sched, int side)
    : x0_(std::move(x0_true)), sched_(&sched), side_(side) {}

DualEstimate OracleDenoiser::predict(std::span<const double> x_t, int t) {
  ++network_calls_;
  return {eps_from_x0(x_t, x0_, t, *sched_), x0_};
}

void SamplerConfig::validate(const NoiseSchedule& sched) const {
  check(t_start < sched.num_timesteps, ErrorCode::kInvalidArgument, "sampler t_start beyond the schedule");
  check(t_start > t_mid_high && t_mid_high > t_mid_low && t_mid_low >= 0, ErrorCode::kInvalidArgument,
        "sampler requires t_start > t_mid_high > t_mid_low >= 0");
  check(ddim_interval > 0 && (t_mid_high - t_mid_low) % ddim_interval == 0, ErrorCode::kInvalidArgument,
        "sampler (t_mid_high - t_mid_low) must be divisible by ddim_interval");
  check(fanout_per_branch >= 1, ErrorCode::kInvalidArgument, "sampler fanout_per_branch must be >= 1");
  check(eta_refine >= 0 && eta_refine <= 1, ErrorCode::kInvalidArgument, "sampler eta_refine must be in [0, 1]");
}

const char* trunk_name(Trunk t) { return t == Trunk::kMask ? "mask" : "noise"; }

DualEstimate branch_estimate(const DualEstimate& raw, std::span<const double> x_t, int t, Branch branch,
                             const NoiseSchedule& sched) {
  DualEstimate e;
  if (branch == Branch::kMask) {
    e.x0_hat = raw.x0_hat;
    e.eps_hat = eps_from_x0(x_t, e.x0_hat, t, sched);
  } else {
    e.eps_hat = raw.eps_hat;
    e.x0_hat = x0_from_eps(x_t, e.eps_hat, t, sched);
    for (double& v : e.x0_hat) v = std::clamp(v, -1.0, 1.0);
  }
  return e;
}

EnsembleOutput staged_sample(std::span<const float> image, Denoiser& denoiser, const NoiseSchedule& sched,
                             const SamplerConfig& cfg, std::optional<Field> x_start) {
  cfg.validate(sched);
  const std::size_t n = static_cast<std::size_t>(denoiser.side()) * denoiser.side();
  const int calls0 = denoiser.network_calls();
  EnsembleOutput out;
  out.x_start = x_start ? std::move(*x_start) : start_noise(n, cfg.seed);
  check(out.x_start.size() == n, ErrorCode::kShapeMismatch, "sampler start state size mismatch");

  denoiser.condition(image);

  // Single mask-branch jump to t_mid_high.
  {
    const DualEstimate e = branch_estimate(denoiser.predict(out.x_start, cfg.t_start), out.x_start, cfg.t_start,
                                           Branch::kMask, sched);
    out.x_mid_high = ddim_step(out.x_start, e.x0_hat, e.eps_hat, cfg.t_start, cfg.t_mid_high, sched, 0.0, nullptr);
    check_finite(out.x_mid_high, "jump " + std::to_string(cfg.t_start) + "->" + std::to_string(cfg.t_mid_high));
  }

  for (int t = cfg.t_mid_high; t >= cfg.t_mid_low; t -= cfg.ddim_interval) out.trunk_timesteps.push_back(t);

  for (Trunk trunk : {Trunk::kMask, Trunk::kNoise}) {
    const Branch br = trunk == Trunk::kMask ? Branch::kMask : Branch::kNoise;
    Field x = out.x_mid_high;
    for (std::size_t k = 0; k + 1 < out.trunk_timesteps.size(); ++k) {
      const int t = out.trunk_timesteps[k], tn = out.trunk_timesteps[k + 1];
      const DualEstimate e = branch_estimate(denoiser.predict(x, t), x, t, br, sched);
      x = ddim_step(x, e.x0_hat, e.eps_hat, t, tn, sched, 0.0, nullptr);
      check_finite(x, std::string(trunk_name(trunk)) + " trunk step " + std::to_string(k) + " (t=" +
                          std::to_string(t) + ")");
    }
    (trunk == Trunk::kMask ? out.trunk_mask : out.trunk_noise) = std::move(x);
  }

  // Stochastic single-jump refinement from each trunk state using the noise
  // branch; lands on the forward-kernel state at index 0.
  const double ab_low = sched.alpha_bar(cfg.t_mid_low), ab_0 = sched.alpha_bar(0);
  for (Trunk trunk : {Trunk::kMask, Trunk::kNoise}) {
    const Field& x = trunk == Trunk::kMask ? out.trunk_mask : out.trunk_noise;
    for (int j = 0; j < cfg.fanout_per_branch; ++j) {
      const std::uint64_t s =
          derive_seed(cfg.seed, {kSamplerTag, 1 + static_cast<std::uint64_t>(trunk), static_cast<std::uint64_t>(j)});
      Rng rng(s);
      const DualEstimate e = branch_estimate(denoiser.predict(x, cfg.t_mid_low), x, cfg.t_mid_low, Branch::kNoise, sched);
      Field x0 = cfg.t_mid_low == 0 ? e.x0_hat
                                    : ddim_step_between(x, e.x0_hat, e.eps_hat, ab_low, ab_0, cfg.eta_refine, &rng);
      check_finite(x0, std::string(trunk_name(trunk)) + " refinement " + std::to_string(j));
      out.masks.push_back(threshold(x0));
      out.finals.push_back(std::move(x0));
      out.provenance.push_back({trunk, j, s});
    }
  }
  out.network_calls = denoiser.network_calls() - calls0;
  return out;
}

EvaluationCount count_network_evaluations(const SamplerConfig& cfg) {
  const int steps = cfg.trunk_steps();
  return {1 + steps, 1 + 2 * steps + 2 * cfg.fanout_per_branch};
}

std::vector<std::uint8_t> uniform_ddim_sample(std::span<const float> image, Denoiser& denoiser,
                                              const NoiseSchedule& sched, Branch branch, int steps, std::uint64_t seed) {
  const int T = sched.num_timesteps;
  check(steps >= 1 && steps <= T, ErrorCode::kInvalidArgument, "uniform sampler steps must be in [1, T]");
  const std::size_t n = static_cast<std::size_t>(denoiser.side()) * denoiser.side();
  Field x = start_noise(n, seed);
  denoiser.condition(image);
  // Evenly spaced visits T-1, T-1-k, ..., the last step lands on the clean sample.
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) ts.push_back(T - 1 - static_cast<int>(static_cast<long long>(i) * T / steps));
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const DualEstimate e = branch_estimate(denoiser.predict(x, t), x, t, branch, sched);
    if (k + 1 == ts.size()) {
      x = e.x0_hat;
    } else {
      x = ddim_step(x, e.x0_hat, e.eps_hat, t, ts[k + 1], sched, 0.0, nullptr);
    }
    check_finite(x, "uniform step " + std::to_string(k));
  }
  return threshold(x);
}

std::vector<std::uint8_t> one_step_sample(std::span<const float> image, Denoiser& denoiser, const NoiseSchedule& sched,
                                          Branch branch, std::uint64_t seed) {
  return uniform_ddim_sample(image, denoiser, sched, branch, 1, seed);
}

}  // namespace stagediff
