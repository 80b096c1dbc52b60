// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stagediff/random.hpp"
#include "stagediff/tensor.hpp"

namespace stagediff::nn {

// Named parameters in registration order. Names are stable across runs and
// are what checkpoints key on.
using ParamList = std::vector<std::pair<std::string, Var>>;

class ParamBuilder {
 public:
  ParamBuilder(ParamList& out, Rng& rng, std::string prefix = {})
      : out_(&out), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamBuilder sub(const std::string& name) const { return ParamBuilder(*out_, *rng_, join(name)); }

  Var uniform(const std::string& name, Shape shape, double bound) const;
  Var constant(const std::string& name, Shape shape, real value) const;

 private:
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  ParamList* out_;
  Rng* rng_;
  std::string prefix_;
};

struct Conv2d {
  Var weight, bias;
  int stride = 1, pad = 1;

  static Conv2d make(const ParamBuilder& pb, int cin, int cout, int kernel, int stride = 1, bool zero_init = false);
  Var operator()(const Var& x) const;
};

struct Linear {
  Var weight, bias;

  static Linear make(const ParamBuilder& pb, int in, int out);
  Var operator()(const Var& x) const;
};

struct GroupNorm {
  Var gamma, beta;
  int groups = 1;

  static GroupNorm make(const ParamBuilder& pb, int channels, int max_groups = 8);
  Var operator()(const Var& x) const;
};

// GroupNorm -> SiLU -> conv3x3 -> (+ time projection) -> GroupNorm -> SiLU -> conv3x3, plus a residual path.
struct ResBlock {
  GroupNorm norm1, norm2;
  Conv2d conv1, conv2, skip;
  Linear time_proj;  // undefined when the block is not time-conditioned

  static ResBlock make(const ParamBuilder& pb, int cin, int cout, int time_dim);
  // `temb_act` is the already activated time embedding [N, time_dim] or undefined.
  Var operator()(const Var& x, const Var& temb_act) const;
};

// Multi-head attention between two feature maps of identical spatial size.
// Queries come from `query`, keys and values from `context`; the output
// projection is zero-initialized.
struct CrossAttention {
  GroupNorm norm_q, norm_kv;
  Conv2d to_q, to_k, to_v, to_out;
  int heads = 1;

  static CrossAttention make(const ParamBuilder& pb, int channels, int heads);
  // When `weights_out` is non-null it receives the softmax weights
  // [N*heads, L_query, L_context].
  Var operator()(const Var& query, const Var& context, std::vector<real>* weights_out = nullptr) const;
};

// Sinusoidal timestep features [N, dim] (constant, no gradient).
Var timestep_features(const std::vector<int>& timesteps, int dim);

}  // namespace stagediff::nn
