// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/schedule.hpp"

#include <cmath>

#include "stagediff/error.hpp"
#include "stagediff/random.hpp"

namespace stagediff {
namespace {

void check_t(int t, const NoiseSchedule& sched) {
  check(t >= 0 && t < sched.num_timesteps, ErrorCode::kOutOfRange,
        "timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.num_timesteps - 1) + "]");
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  check(a == b, ErrorCode::kShapeMismatch,
        std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

constexpr double kMinAlphaBar = 1e-12;

}  // namespace

double NoiseSchedule::alpha_bar(int t) const {
  check_t(t, *this);
  return alphas_cumprod[static_cast<std::size_t>(t)];
}

NoiseSchedule build_schedule(int num_timesteps, const BetaSpec& spec) {
  check(num_timesteps >= 2, ErrorCode::kInvalidArgument, "schedule needs T >= 2, got " + std::to_string(num_timesteps));
  NoiseSchedule s;
  s.num_timesteps = num_timesteps;
  s.spec = spec;
  if (spec.family == "linear") {
    check(spec.beta_start > 0 && spec.beta_end < 1 && spec.beta_start <= spec.beta_end, ErrorCode::kInvalidArgument,
          "linear schedule needs 0 < beta_start <= beta_end < 1");
    s.betas.resize(static_cast<std::size_t>(num_timesteps));
    for (int i = 0; i < num_timesteps; ++i)
      s.betas[i] = spec.beta_start + (spec.beta_end - spec.beta_start) * i / (num_timesteps - 1);
  } else if (spec.family == "explicit") {
    check(static_cast<int>(spec.explicit_betas.size()) == num_timesteps, ErrorCode::kInvalidArgument,
          "explicit schedule needs exactly T betas");
    s.betas = spec.explicit_betas;
  } else {
    fail(ErrorCode::kInvalidArgument, "unsupported beta schedule family '" + spec.family + "'");
  }
  s.alphas_cumprod.resize(s.betas.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < s.betas.size(); ++i) {
    check(s.betas[i] > 0 && s.betas[i] < 1, ErrorCode::kInvalidArgument, "betas must lie in (0,1)");
    prod *= 1.0 - s.betas[i];
    s.alphas_cumprod[i] = prod;
  }
  return s;
}

NoisySample add_noise(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& sched) {
  check_same(x0.size(), eps.size(), "add_noise");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  NoisySample out;
  out.t = t;
  out.eps.assign(eps.begin(), eps.end());
  out.x_t.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out.x_t[i] = a * x0[i] + b * eps[i];
  return out;
}

Field x0_from_eps(std::span<const double> x_t, std::span<const double> eps_hat, int t, const NoiseSchedule& sched) {
  check_same(x_t.size(), eps_hat.size(), "x0_from_eps");
  const double ab = sched.alpha_bar(t);
  check(ab > kMinAlphaBar, ErrorCode::kNumeric, "x0_from_eps: alpha_bar is numerically zero at t=" + std::to_string(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Field out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
  return out;
}

Field eps_from_x0(std::span<const double> x_t, std::span<const double> x0_hat, int t, const NoiseSchedule& sched) {
  check_same(x_t.size(), x0_hat.size(), "eps_from_x0");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Field out(x_t.size());
  if (b < 1e-12) return out;  // no noise component: eps is identically zero
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - a * x0_hat[i]) / b;
  return out;
}

namespace {

double sigma_between(double ab_t, double ab_next, double eta) {
  if (eta == 0.0 || ab_next >= 1.0) return 0.0;
  return eta * std::sqrt((1.0 - ab_next) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_next);
}

}  // namespace

// Index 0 as a reverse-chain target is the clean sample (alpha_bar = 1).
double ddim_sigma(int t, int t_next, const NoiseSchedule& sched, double eta) {
  check(t_next < t, ErrorCode::kInvalidArgument, "ddim_step needs t_next < t");
  check(eta >= 0.0 && eta <= 1.0, ErrorCode::kInvalidArgument, "eta must lie in [0,1]");
  check_t(t_next, sched);
  const double ab_next = t_next == 0 ? 1.0 : sched.alpha_bar(t_next);
  return sigma_between(sched.alpha_bar(t), ab_next, eta);
}

Field ddim_step_between(std::span<const double> x_t, std::span<const double> x0_hat, std::span<const double> eps_hat,
                        double ab_t, double ab_next, double eta, Rng* rng) {
  check_same(x_t.size(), x0_hat.size(), "ddim_step");
  check_same(x_t.size(), eps_hat.size(), "ddim_step");
  check(eta >= 0.0 && eta <= 1.0, ErrorCode::kInvalidArgument, "eta must lie in [0,1]");
  check(eta == 0.0 || rng != nullptr, ErrorCode::kInvalidArgument, "ddim_step with eta > 0 needs a randomness source");
  const double sigma = sigma_between(ab_t, ab_next, eta);
  const double a = std::sqrt(ab_next);
  const double c = std::sqrt(std::max(0.0, 1.0 - ab_next - sigma * sigma));
  Field out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0_hat[i] + c * eps_hat[i];
  if (sigma > 0.0)
    for (auto& v : out) v += sigma * rng->normal();
  return out;
}

Field ddim_step(std::span<const double> x_t, std::span<const double> x0_hat, std::span<const double> eps_hat, int t,
                int t_next, const NoiseSchedule& sched, double eta, Rng* rng) {
  check_t(t, sched);
  check(t_next < t, ErrorCode::kInvalidArgument,
        "ddim_step needs t_next < t (got t=" + std::to_string(t) + ", t_next=" + std::to_string(t_next) + ")");
  check_t(t_next, sched);
  const double ab_next = t_next == 0 ? 1.0 : sched.alpha_bar(t_next);
  return ddim_step_between(x_t, x0_hat, eps_hat, sched.alpha_bar(t), ab_next, eta, rng);
}

Field to_diffusion_domain(std::span<const float> mask01) {
  Field out(mask01.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask01[i] > 0.5f ? 1.0 : -1.0;
  return out;
}

std::vector<unsigned char> from_diffusion_domain(std::span<const double> x) {
  std::vector<unsigned char> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? 1 : 0;
  return out;
}

void to_json(nlohmann::json& j, const BetaSpec& s) {
  j = nlohmann::json{{"family", s.family}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
  if (!s.explicit_betas.empty()) j["betas"] = s.explicit_betas;
}

void from_json(const nlohmann::json& j, BetaSpec& s) {
  s.family = j.value("family", std::string("linear"));
  s.beta_start = j.value("beta_start", 1e-4);
  s.beta_end = j.value("beta_end", 0.02);
  if (j.contains("betas")) s.explicit_betas = j.at("betas").get<std::vector<double>>();
}

nlohmann::json schedule_descriptor(const NoiseSchedule& sched) {
  nlohmann::json j = sched.spec;
  j["num_timesteps"] = sched.num_timesteps;
  return j;
}

NoiseSchedule schedule_from_descriptor(const nlohmann::json& j) {
  return build_schedule(j.value("num_timesteps", 1000), j.get<BetaSpec>());
}

}  // namespace stagediff
