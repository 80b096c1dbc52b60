// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Forward diffusion kernel and DDIM reverse-step arithmetic.
//
// Diffusion-domain fields are plain double vectors; masks {0,1} map to
// {-1,+1} before noising (see to_diffusion_domain).

#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace stagediff {

class Rng;

using Field = std::vector<double>;

struct BetaSpec {
  std::string family = "linear";
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<double> explicit_betas;  // used by the "explicit" family
};

struct NoiseSchedule {
  int num_timesteps = 0;
  std::vector<double> betas;
  std::vector<double> alphas_cumprod;
  BetaSpec spec;

  double alpha_bar(int t) const;
};

// Families: "linear" (beta_start..beta_end evenly spaced) and "explicit".
NoiseSchedule build_schedule(int num_timesteps, const BetaSpec& spec = {});

struct NoisySample {
  Field x_t;
  int t = 0;
  Field eps;
};

NoisySample add_noise(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& sched);

Field x0_from_eps(std::span<const double> x_t, std::span<const double> eps_hat, int t, const NoiseSchedule& sched);
Field eps_from_x0(std::span<const double> x_t, std::span<const double> x0_hat, int t, const NoiseSchedule& sched);

// One DDIM update t -> t_next using the caller-chosen (x0_hat, eps_hat) pair.
// t_next == 0 means the clean sample (cumulative alpha 1). `rng` may be null
// when eta == 0.
Field ddim_step(std::span<const double> x_t, std::span<const double> x0_hat, std::span<const double> eps_hat, int t,
                int t_next, const NoiseSchedule& sched, double eta, Rng* rng);

// Same update expressed directly in cumulative-alpha terms; lets a caller land
// on the forward-kernel state at index 0 instead of the clean sample.
Field ddim_step_between(std::span<const double> x_t, std::span<const double> x0_hat, std::span<const double> eps_hat,
                        double ab_t, double ab_next, double eta, Rng* rng);

// Standard deviation of the injected noise for a DDIM step.
double ddim_sigma(int t, int t_next, const NoiseSchedule& sched, double eta);

Field to_diffusion_domain(std::span<const float> mask01);
std::vector<unsigned char> from_diffusion_domain(std::span<const double> x);

void to_json(nlohmann::json& j, const BetaSpec& s);
void from_json(const nlohmann::json& j, BetaSpec& s);
nlohmann::json schedule_descriptor(const NoiseSchedule& sched);
NoiseSchedule schedule_from_descriptor(const nlohmann::json& j);

}  // namespace stagediff
