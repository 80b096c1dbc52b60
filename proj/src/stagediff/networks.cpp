// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/networks.hpp"

#include "stagediff/error.hpp"
#include "stagediff/hash.hpp"
#include "stagediff/ops.hpp"

namespace stagediff {

void NetworkConfig::validate() const {
  check(input_side > 0 && input_side % (1 << (kLevels - 1)) == 0, ErrorCode::kInvalidArgument,
        "network input_side must be divisible by 16 (got " + std::to_string(input_side) + ")");
  check(in_channels == 1 || in_channels == 3, ErrorCode::kInvalidArgument, "network in_channels must be 1 or 3");
  for (int w : widths) check(w > 0, ErrorCode::kInvalidArgument, "network widths must be positive");
  check(time_dim >= 2 && time_dim % 2 == 0, ErrorCode::kInvalidArgument, "time_dim must be even and >= 2");
  for (int i = 0; i < kLevels; ++i)
    if (use_dca && dca_levels[i])
      check(heads > 0 && widths[i] % heads == 0, ErrorCode::kInvalidArgument,
            "attention heads must divide the width of every DCA level");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  std::vector<int> dca;
  for (int i = 0; i < kLevels; ++i)
    if (c.dca_levels[i]) dca.push_back(i);
  j = nlohmann::json{{"input_side", c.input_side}, {"in_channels", c.in_channels}, {"widths", c.widths},
                     {"dca_levels", dca},          {"use_dca", c.use_dca},         {"heads", c.heads},
                     {"time_dim", c.time_dim}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.input_side = j.value("input_side", d.input_side);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.widths = j.value("widths", d.widths);
  c.use_dca = j.value("use_dca", d.use_dca);
  c.heads = j.value("heads", d.heads);
  c.time_dim = j.value("time_dim", d.time_dim);
  c.dca_levels = d.dca_levels;
  if (j.contains("dca_levels")) {
    c.dca_levels.fill(false);
    for (int lvl : j.at("dca_levels").get<std::vector<int>>()) {
      check(lvl >= 0 && lvl < kLevels, ErrorCode::kInvalidArgument, "dca level out of range");
      c.dca_levels[lvl] = true;
    }
  }
}

Cfenet::Cfenet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, {0xcfe}));
  nn::ParamBuilder pb(params_, rng, "cfenet");
  const auto& w = cfg_.widths;
  stem_ = nn::Conv2d::make(pb.sub("stem"), cfg_.in_channels, w[0], 3);
  for (int i = 0; i < kLevels; ++i) {
    const int cin = i == 0 ? w[0] : w[i - 1];
    enc_[i] = nn::ResBlock::make(pb.sub("enc" + std::to_string(i)), cin, w[i], 0);
    if (i < kLevels - 1) down_[i] = nn::Conv2d::make(pb.sub("down" + std::to_string(i)), w[i], w[i], 3, 2);
  }
  mid_ = nn::ResBlock::make(pb.sub("mid"), w[kLevels - 1], w[kLevels - 1], 0);
  for (int i = kLevels - 2; i >= 0; --i)
    dec_[i] = nn::ResBlock::make(pb.sub("dec" + std::to_string(i)), w[i + 1] + w[i], w[i], 0);
  head_norm_ = nn::GroupNorm::make(pb.sub("head_norm"), w[0]);
  head_ = nn::Conv2d::make(pb.sub("head"), w[0], 1, 1);
}

void Cfenet::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& [name, p] : params_) p.set_requires_grad(!frozen);
}

CfenetOutput Cfenet::forward(const Var& image) const {
  check(image.shape().size() == 4 && image.dim(1) == cfg_.in_channels && image.dim(2) == cfg_.input_side &&
            image.dim(3) == cfg_.input_side,
        ErrorCode::kShapeMismatch,
        "cfenet expects [N," + std::to_string(cfg_.in_channels) + "," + std::to_string(cfg_.input_side) + "," +
            std::to_string(cfg_.input_side) + "], got " + shape_str(image.shape()));
  std::array<Var, kLevels> skips;
  Var h = stem_(image);
  for (int i = 0; i < kLevels; ++i) {
    h = enc_[i](h, Var());
    skips[i] = h;
    if (i < kLevels - 1) h = down_[i](h);
  }
  CfenetOutput out;
  Var d = mid_(h, Var());
  out.features.cf[kLevels - 1] = d;
  for (int i = kLevels - 2; i >= 0; --i) {
    d = dec_[i](ops::concat_channels(ops::upsample_nearest2x(d), skips[i]), Var());
    out.features.cf[i] = d;
  }
  out.seg_logits = head_(ops::silu(head_norm_(d)));
  return out;
}

DualCrossAttention DualCrossAttention::make(const nn::ParamBuilder& pb, int channels, int heads) {
  return {nn::CrossAttention::make(pb.sub("block1"), channels, heads),
          nn::CrossAttention::make(pb.sub("block2"), channels, heads)};
}

Var DualCrossAttention::operator()(const Var& cond_feat, const Var& denoise_feat, std::vector<real>* first_weights,
                                   std::vector<real>* second_weights) const {
  check(cond_feat.shape() == denoise_feat.shape(), ErrorCode::kShapeMismatch,
        "dca: conditional " + shape_str(cond_feat.shape()) + " vs denoising " + shape_str(denoise_feat.shape()));
  Var h1 = ops::add(denoise_feat, first(denoise_feat, cond_feat, first_weights));
  return ops::add(h1, second(cond_feat, h1, second_weights));
}

Var dca_fuse(const Var& cond_feat, const Var& denoise_feat, const DualCrossAttention& params) {
  return params(cond_feat, denoise_feat);
}

Dnet::Dnet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, {0xd7e}));
  nn::ParamBuilder pb(params_, rng, "dnet");
  const auto& w = cfg_.widths;
  const int td = cfg_.time_dim;
  time_fc1_ = nn::Linear::make(pb.sub("time_fc1"), td, td);
  time_fc2_ = nn::Linear::make(pb.sub("time_fc2"), td, td);
  stem_ = nn::Conv2d::make(pb.sub("stem"), 1, w[0], 3);
  for (int i = 0; i < kLevels; ++i) {
    const std::string lvl = std::to_string(i);
    const int cin = i == 0 ? w[0] : w[i - 1];
    enc_[i] = nn::ResBlock::make(pb.sub("enc" + lvl), cin, w[i], td);
    cond_proj_[i] = nn::Conv2d::make(pb.sub("cond_proj" + lvl), w[i], w[i], 1);
    if (cfg_.use_dca && cfg_.dca_levels[i]) dca_[i] = DualCrossAttention::make(pb.sub("dca" + lvl), w[i], cfg_.heads);
    if (i < kLevels - 1) down_[i] = nn::Conv2d::make(pb.sub("down" + lvl), w[i], w[i], 3, 2);
  }
  noise_dec_ = make_decoder(pb.sub("noise_dec"));
  mask_dec_ = make_decoder(pb.sub("mask_dec"));
}

Dnet::Decoder Dnet::make_decoder(const nn::ParamBuilder& pb) const {
  const auto& w = cfg_.widths;
  Decoder d;
  d.mid = nn::ResBlock::make(pb.sub("mid"), w[kLevels - 1], w[kLevels - 1], cfg_.time_dim);
  for (int i = kLevels - 2; i >= 0; --i)
    d.up[i] = nn::ResBlock::make(pb.sub("up" + std::to_string(i)), w[i + 1] + w[i], w[i], cfg_.time_dim);
  d.out_norm = nn::GroupNorm::make(pb.sub("out_norm"), w[0]);
  d.out = nn::Conv2d::make(pb.sub("out"), w[0], 1, 3, 1, /*zero_init=*/true);
  return d;
}

Var Dnet::run_decoder(const Decoder& d, const std::array<Var, kLevels>& skips, const Var& temb) const {
  Var h = d.mid(skips[kLevels - 1], temb);
  for (int i = kLevels - 2; i >= 0; --i) h = d.up[i](ops::concat_channels(ops::upsample_nearest2x(h), skips[i]), temb);
  return d.out(ops::silu(d.out_norm(h)));
}

DnetOutput Dnet::forward(const Var& x_t, const std::vector<int>& timesteps, const ConditionalFeatures& cond) const {
  const int s = cfg_.input_side;
  check(x_t.shape().size() == 4 && x_t.dim(1) == 1 && x_t.dim(2) == s && x_t.dim(3) == s, ErrorCode::kShapeMismatch,
        "dnet expects x_t [N,1," + std::to_string(s) + "," + std::to_string(s) + "], got " + shape_str(x_t.shape()));
  const int n = x_t.dim(0);
  check(static_cast<int>(timesteps.size()) == n, ErrorCode::kShapeMismatch, "dnet: one timestep per sample required");
  for (int i = 0; i < kLevels; ++i) {
    const Shape want{n, cfg_.widths[i], s >> i, s >> i};
    check(cond.cf[i].defined() && cond.cf[i].shape() == want, ErrorCode::kShapeMismatch,
          "dnet: conditional feature " + std::to_string(i + 1) + " has shape " +
              (cond.cf[i].defined() ? shape_str(cond.cf[i].shape()) : std::string("<none>")) + ", expected " +
              shape_str(want));
  }

  Var temb = ops::silu(time_fc2_(ops::silu(time_fc1_(nn::timestep_features(timesteps, cfg_.time_dim)))));
  std::array<Var, kLevels> skips;
  Var h = stem_(x_t);
  for (int i = 0; i < kLevels; ++i) {
    h = enc_[i](h, temb);
    h = ops::add(h, cond_proj_[i](cond.cf[i]));
    if (cfg_.use_dca && cfg_.dca_levels[i]) h = dca_[i](cond.cf[i], h);
    skips[i] = h;
    if (i < kLevels - 1) h = down_[i](h);
  }
  return {run_decoder(noise_dec_, skips, temb), run_decoder(mask_dec_, skips, temb)};
}

std::size_t parameter_count(const nn::ParamList& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.size();
  return n;
}

std::string parameter_checksum(const nn::ParamList& params) {
  Sha256 h;
  for (const auto& [name, p] : params) {
    h.update(name);
    for (real v : p.data()) {
      const float f = static_cast<float>(v);
      h.update(&f, sizeof f);
    }
  }
  return h.hex();
}

Var batch_field(const std::vector<const Field*>& fields, int side) {
  const std::size_t per = static_cast<std::size_t>(side) * side;
  std::vector<real> v;
  v.reserve(fields.size() * per);
  for (const Field* f : fields) {
    check(f->size() == per, ErrorCode::kShapeMismatch, "field size does not match network side");
    for (double x : *f) v.push_back(static_cast<real>(x));
  }
  return Var::constant({static_cast<int>(fields.size()), 1, side, side}, std::move(v));
}

}  // namespace stagediff
