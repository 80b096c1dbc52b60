// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>
#include <vector>

#include "stagediff/tensor.hpp"

namespace stagediff::ops {

// x [N,Ci,H,W], weight [Co,Ci,K,K], bias [Co] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

// Normalizes over (C/groups, H, W) per sample; gamma, beta are [C].
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, real eps = real(1e-5));

Var silu(const Var& x);
Var tanh(const Var& x);

Var add(const Var& a, const Var& b);
Var scale(const Var& x, real s);
// x [N,C,H,W] + v [N,C] broadcast over space.
Var add_channel_bias(const Var& x, const Var& v);

// x [N,In], weight [Out,In], bias [Out].
Var linear(const Var& x, const Var& weight, const Var& bias);

Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest2x(const Var& x);
Var reshape(const Var& x, Shape shape);

// Batched matrix product over the leading dimension of 3-D operands:
// out[b] = op(a[b]) * op(b[b]) where op transposes when the flag is set.
Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b);
// softmax(scale * x) along the last dimension.
Var softmax_lastdim(const Var& x, real scale = 1);

// Scalar losses. Targets are constants.
Var mse_loss(const Var& pred, const std::vector<real>& target);
// Mean over samples of 1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s), p = sigmoid(logits).
Var soft_dice_loss(const Var& logits, const std::vector<real>& mask, real smooth);
// Mean binary cross-entropy with logits.
Var bce_with_logits(const Var& logits, const std::vector<real>& mask);

// sum_k coef_k * terms_k over scalar terms.
Var weighted_sum(const std::vector<std::pair<Var, real>>& terms);

}  // namespace stagediff::ops
