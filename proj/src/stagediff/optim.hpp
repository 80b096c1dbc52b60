// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "json.hpp"
#include "stagediff/layers.hpp"

namespace stagediff {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Decoupled weight decay Adam. Only parameters with requires_grad are touched.
class AdamW {
 public:
  AdamW(nn::ParamList& params, AdamWConfig cfg);

  void step(double lr);
  void zero_grad();
  long long steps() const { return t_; }

 private:
  nn::ParamList* params_;
  AdamWConfig cfg_;
  std::vector<std::vector<real>> m_, v_;
  long long t_ = 0;
};

// Cosine annealing from base_lr to min_lr across total_steps.
double cosine_lr(double base_lr, double min_lr, long long step, long long total_steps);

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(nn::ParamList& params, double max_norm);
double grad_norm(const nn::ParamList& params);

void to_json(nlohmann::json& j, const AdamWConfig& c);
void from_json(const nlohmann::json& j, AdamWConfig& c);

}  // namespace stagediff
