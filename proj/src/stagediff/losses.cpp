// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/losses.hpp"

#include <cmath>

#include "stagediff/error.hpp"
#include "stagediff/ops.hpp"

namespace stagediff {

double noise_loss(std::span<const double> eps_hat, std::span<const double> eps) {
  check(eps_hat.size() == eps.size(), ErrorCode::kShapeMismatch, "noise_loss: size mismatch");
  check(!eps.empty(), ErrorCode::kInvalidArgument, "noise_loss: empty input");
  double s = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double d = eps_hat[i] - eps[i];
    s += d * d;
  }
  return s / static_cast<double>(eps.size());
}

DiceCe dice_ce_loss(std::span<const double> logits, std::span<const double> mask) {
  check(logits.size() == mask.size(), ErrorCode::kShapeMismatch, "dice_ce_loss: size mismatch");
  check(!mask.empty(), ErrorCode::kInvalidArgument, "dice_ce_loss: empty input");
  double inter = 0, sp = 0, sg = 0, ce = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double z = logits[i], g = mask[i];
    const double p = 1.0 / (1.0 + std::exp(-z));
    inter += p * g;
    sp += p;
    sg += g;
    // log(1 + e^-|z|) form stays finite for saturated logits.
    ce += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
  }
  return {1.0 - (2.0 * inter + kDiceSmooth) / (sp + sg + kDiceSmooth), ce / static_cast<double>(mask.size())};
}

LossBreakdown combine(double l_noise, double l_dice, double l_ce, Stage stage, const StagePolicy& policy) {
  const LossWeights w = loss_weights(stage, policy);
  return {l_noise, l_dice, l_ce, w.alpha * l_noise + w.beta * (l_dice + l_ce), stage};
}

Var noise_loss_var(const Var& eps_hat, const std::vector<real>& eps) { return ops::mse_loss(eps_hat, eps); }

Var dice_loss_var(const Var& logits, const std::vector<real>& mask) {
  return ops::soft_dice_loss(logits, mask, static_cast<real>(kDiceSmooth));
}

Var ce_loss_var(const Var& logits, const std::vector<real>& mask) { return ops::bce_with_logits(logits, mask); }

Var weighted_dual_loss(const Var& eps_hat, const Var& x0_logits, const std::vector<real>& eps,
                       const std::vector<real>& mask, const std::vector<LossWeights>& weights,
                       std::vector<LossBreakdown>* per_sample) {
  check(eps_hat.shape() == x0_logits.shape() && eps_hat.size() == eps.size() && mask.size() == eps.size(),
        ErrorCode::kShapeMismatch, "weighted_dual_loss: shape mismatch");
  const int n = eps_hat.dim(0);
  check(static_cast<int>(weights.size()) == n, ErrorCode::kShapeMismatch, "weighted_dual_loss: one weight pair per sample");
  const std::size_t per = eps.size() / static_cast<std::size_t>(n);
  const double inv_p = 1.0 / static_cast<double>(per);

  std::vector<double> prob(eps.size()), inter(n, 0), denom(n, 0);
  std::vector<LossBreakdown> parts(n);
  double total = 0;
  for (int s = 0; s < n; ++s) {
    double se = 0, ce = 0, sg = 0, sp = 0;
    for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
      const double d = static_cast<double>(eps_hat.data()[i]) - eps[i];
      se += d * d;
      const double z = x0_logits.data()[i], g = mask[i];
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      prob[i] = p;
      inter[s] += p * g;
      sp += p;
      sg += g;
      ce += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
    }
    denom[s] = sp + sg + kDiceSmooth;
    auto& b = parts[s];
    b.l_noise = se * inv_p;
    b.l_dice = 1.0 - (2.0 * inter[s] + kDiceSmooth) / denom[s];
    b.l_ce = ce * inv_p;
    b.total = weights[s].alpha * b.l_noise + weights[s].beta * (b.l_dice + b.l_ce);
    total += b.total;
  }
  if (per_sample) *per_sample = parts;

  auto en = eps_hat.ptr(), xn = x0_logits.ptr();
  return ag::make_result(
      {1}, {static_cast<real>(total / n)}, {eps_hat, x0_logits},
      [en, xn, eps, mask, weights, n, per, inv_p, prob = std::move(prob), inter = std::move(inter),
       denom = std::move(denom)](const ag::Node& self) {
        const double g0 = self.grad[0] / n;
        real* de = en->requires_grad ? en->grad_buffer().data() : nullptr;
        real* dz = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
        for (int s = 0; s < n; ++s) {
          const double a = weights[s].alpha * g0, b = weights[s].beta * g0;
          const double num = 2.0 * inter[s] + kDiceSmooth, den2 = denom[s] * denom[s];
          for (std::size_t i = s * per; i < (s + 1) * per; ++i) {
            if (de) de[i] += static_cast<real>(a * 2.0 * (static_cast<double>(en->value[i]) - eps[i]) * inv_p);
            if (dz) {
              const double p = prob[i];
              const double d_dice = -(2.0 * mask[i] * denom[s] - num) / den2 * p * (1.0 - p);
              const double d_ce = (p - mask[i]) * inv_p;
              dz[i] += static_cast<real>(b * (d_dice + d_ce));
            }
          }
        }
      });
}

DiceIou dice_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  check(pred.size() == gt.size(), ErrorCode::kShapeMismatch, "dice_iou: mask sizes differ");
  std::size_t np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    np += p;
    ng += g;
    ni += p && g;
  }
  if (np + ng == 0) return {1.0, 1.0, true};
  const double uni = static_cast<double>(np + ng - ni);
  return {2.0 * static_cast<double>(ni) / static_cast<double>(np + ng), static_cast<double>(ni) / uni, false};
}

MetricSummary summarize(const std::vector<DiceIou>& scores, EmptyPolicy policy) {
  MetricSummary m;
  for (const auto& s : scores) {
    if (s.both_empty && policy == EmptyPolicy::kExclude) {
      ++m.excluded;
      continue;
    }
    m.mdice += s.dice;
    m.miou += s.iou;
    ++m.counted;
  }
  if (m.counted > 0) {
    m.mdice /= m.counted;
    m.miou /= m.counted;
  }
  return m;
}

}  // namespace stagediff
