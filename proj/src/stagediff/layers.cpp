// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/layers.hpp"

#include <cmath>

#include "stagediff/error.hpp"
#include "stagediff/ops.hpp"

namespace stagediff::nn {

Var ParamBuilder::uniform(const std::string& name, Shape shape, double bound) const {
  std::vector<real> v(numel(shape));
  for (auto& x : v) x = static_cast<real>(rng_->uniform(-bound, bound));
  Var p = Var::parameter(std::move(shape), std::move(v));
  out_->emplace_back(join(name), p);
  return p;
}

Var ParamBuilder::constant(const std::string& name, Shape shape, real value) const {
  std::vector<real> v(numel(shape), value);
  Var p = Var::parameter(std::move(shape), std::move(v));
  out_->emplace_back(join(name), p);
  return p;
}

Conv2d Conv2d::make(const ParamBuilder& pb, int cin, int cout, int kernel, int stride, bool zero_init) {
  Conv2d c;
  c.stride = stride;
  c.pad = kernel / 2;
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel * kernel));
  if (zero_init) {
    c.weight = pb.constant("weight", {cout, cin, kernel, kernel}, 0);
    c.bias = pb.constant("bias", {cout}, 0);
  } else {
    c.weight = pb.uniform("weight", {cout, cin, kernel, kernel}, bound);
    c.bias = pb.uniform("bias", {cout}, bound);
  }
  return c;
}

Var Conv2d::operator()(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad); }

Linear Linear::make(const ParamBuilder& pb, int in, int out) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = pb.uniform("weight", {out, in}, bound);
  l.bias = pb.uniform("bias", {out}, bound);
  return l;
}

Var Linear::operator()(const Var& x) const { return ops::linear(x, weight, bias); }

GroupNorm GroupNorm::make(const ParamBuilder& pb, int channels, int max_groups) {
  GroupNorm g;
  g.groups = std::min(max_groups, channels);
  while (channels % g.groups != 0) --g.groups;
  g.gamma = pb.constant("gamma", {channels}, 1);
  g.beta = pb.constant("beta", {channels}, 0);
  return g;
}

Var GroupNorm::operator()(const Var& x) const { return ops::group_norm(x, gamma, beta, groups); }

ResBlock ResBlock::make(const ParamBuilder& pb, int cin, int cout, int time_dim) {
  ResBlock b;
  b.norm1 = GroupNorm::make(pb.sub("norm1"), cin);
  b.conv1 = Conv2d::make(pb.sub("conv1"), cin, cout, 3);
  if (time_dim > 0) b.time_proj = Linear::make(pb.sub("time_proj"), time_dim, cout);
  b.norm2 = GroupNorm::make(pb.sub("norm2"), cout);
  b.conv2 = Conv2d::make(pb.sub("conv2"), cout, cout, 3);
  if (cin != cout) b.skip = Conv2d::make(pb.sub("skip"), cin, cout, 1);
  return b;
}

Var ResBlock::operator()(const Var& x, const Var& temb_act) const {
  Var h = conv1(ops::silu(norm1(x)));
  if (time_proj.weight.defined() && temb_act.defined()) h = ops::add_channel_bias(h, time_proj(temb_act));
  h = conv2(ops::silu(norm2(h)));
  return ops::add(skip.weight.defined() ? skip(x) : x, h);
}

CrossAttention CrossAttention::make(const ParamBuilder& pb, int channels, int heads) {
  check(heads > 0 && channels % heads == 0, ErrorCode::kInvalidArgument,
        "attention heads must divide the channel width (" + std::to_string(channels) + ")");
  CrossAttention a;
  a.heads = heads;
  a.norm_q = GroupNorm::make(pb.sub("norm_q"), channels);
  a.norm_kv = GroupNorm::make(pb.sub("norm_kv"), channels);
  a.to_q = Conv2d::make(pb.sub("to_q"), channels, channels, 1);
  a.to_k = Conv2d::make(pb.sub("to_k"), channels, channels, 1);
  a.to_v = Conv2d::make(pb.sub("to_v"), channels, channels, 1);
  a.to_out = Conv2d::make(pb.sub("to_out"), channels, channels, 1, 1, /*zero_init=*/true);
  return a;
}

Var CrossAttention::operator()(const Var& query, const Var& context, std::vector<real>* weights_out) const {
  check(query.shape() == context.shape(), ErrorCode::kShapeMismatch,
        "cross-attention features differ: " + shape_str(query.shape()) + " vs " + shape_str(context.shape()));
  const int n = query.dim(0), c = query.dim(1), len = query.dim(2) * query.dim(3);
  const int dh = c / heads;
  Shape split{n * heads, dh, len};
  Var q = ops::reshape(to_q(norm_q(query)), split);
  Var kvn = norm_kv(context);
  Var k = ops::reshape(to_k(kvn), split);
  Var v = ops::reshape(to_v(kvn), split);
  Var scores = ops::bmm(q, k, /*trans_a=*/true, /*trans_b=*/false);
  Var attn = ops::softmax_lastdim(scores, real(1) / std::sqrt(real(dh)));
  if (weights_out) weights_out->assign(attn.data().begin(), attn.data().end());
  Var out = ops::bmm(v, attn, /*trans_a=*/false, /*trans_b=*/true);
  return to_out(ops::reshape(out, query.shape()));
}

Var timestep_features(const std::vector<int>& timesteps, int dim) {
  const int n = static_cast<int>(timesteps.size());
  const int half = dim / 2;
  std::vector<real> v(static_cast<std::size_t>(n) * dim, 0);
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[s] * freq;
      v[s * dim + i] = static_cast<real>(std::sin(arg));
      v[s * dim + half + i] = static_cast<real>(std::cos(arg));
    }
  }
  return Var::constant({n, dim}, std::move(v));
}

}  // namespace stagediff::nn
