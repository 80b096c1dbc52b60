// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/optim.hpp"

#include <cmath>
#include <numbers>

namespace stagediff {

AdamW::AdamW(nn::ParamList& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
  for (const auto& [name, p] : params) {
    m_.emplace_back(p.size(), real(0));
    v_.emplace_back(p.size(), real(0));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const real b1 = static_cast<real>(cfg_.beta1), b2 = static_cast<real>(cfg_.beta2);
  const real step = static_cast<real>(lr / bc1), decay = static_cast<real>(1.0 - lr * cfg_.weight_decay);
  const real inv_bc2 = static_cast<real>(1.0 / bc2), eps = static_cast<real>(cfg_.eps);
  for (std::size_t k = 0; k < params_->size(); ++k) {
    Var& p = (*params_)[k].second;
    if (!p.requires_grad() || !p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      w[i] = w[i] * decay - step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : *params_) p.zero_grad();
}

double cosine_lr(double base_lr, double min_lr, long long step, long long total_steps) {
  if (total_steps <= 1) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

double grad_norm(const nn::ParamList& params) {
  double s = 0;
  for (const auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    for (real g : p.grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(nn::ParamList& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const real f = static_cast<real>(max_norm / norm);
    for (auto& [name, p] : params) {
      if (!p.requires_grad() || !p.has_grad()) continue;
      for (real& g : p.node()->grad) g *= f;
    }
  }
  return norm;
}

void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, AdamWConfig& c) {
  AdamWConfig d;
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

}  // namespace stagediff
