// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "stagediff/error.hpp"
#include "stagediff/fusion.hpp"
#include "stagediff/ops.hpp"
#include "stagediff/random.hpp"

namespace stagediff {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Batch {
  Var image;
  std::vector<real> mask01;     // {0,1}
  std::vector<real> mask_diff;  // {-1,+1}
  std::vector<std::size_t> records;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t end,
                 bool augment, Rng* rng) {
  Batch b;
  const int s = data.side;
  const std::size_t per = static_cast<std::size_t>(s) * s;
  std::vector<real> img;
  img.reserve((end - begin) * per);
  for (std::size_t k = begin; k < end; ++k) {
    const SampleRecord& r = data.records[idx[k]];
    std::vector<float> im = r.image;
    std::vector<std::uint8_t> m = r.mask;
    if (augment && rng) flip_sample(im, m, s, rng->uniform() < 0.5, rng->uniform() < 0.5);
    img.insert(img.end(), im.begin(), im.end());
    for (auto v : m) {
      b.mask01.push_back(v ? real(1) : real(0));
      b.mask_diff.push_back(v ? real(1) : real(-1));
    }
    b.records.push_back(idx[k]);
  }
  b.image = Var::constant({static_cast<int>(end - begin), 1, s, s}, std::move(img));
  return b;
}

void check_finite_loss(double v, const std::string& phase, long long step) {
  check(std::isfinite(v), ErrorCode::kNumeric,
        phase + ": non-finite loss at step " + std::to_string(step) + " (reduce lr or check the data)");
}

// Validation mDice of the thresholded CFENet segmentation head.
double cfenet_val_mdice(const Dataset& data, const std::vector<std::size_t>& idx, const Cfenet& net) {
  if (idx.empty()) return 0;
  std::vector<DiceIou> scores;
  const std::size_t per = static_cast<std::size_t>(data.side) * data.side;
  for (std::size_t b = 0; b < idx.size(); b += 16) {
    const std::size_t e = std::min(idx.size(), b + 16);
    Batch bt = make_batch(data, idx, b, e, false, nullptr);
    const CfenetOutput o = net.forward(bt.image);
    for (std::size_t k = b; k < e; ++k) {
      std::vector<std::uint8_t> pred(per);
      for (std::size_t i = 0; i < per; ++i) pred[i] = o.seg_logits.data()[(k - b) * per + i] > 0 ? 1 : 0;
      scores.push_back(dice_iou(pred, data.records[idx[k]].mask));
    }
  }
  return summarize(scores, EmptyPolicy::kScoreOne).mdice;
}

ConditionalFeatures gather_features(const std::vector<std::vector<std::vector<real>>>& cache,
                                    const std::vector<std::size_t>& slots, const NetworkConfig& net) {
  ConditionalFeatures cf;
  const int n = static_cast<int>(slots.size());
  for (int l = 0; l < kLevels; ++l) {
    const int side = net.input_side >> l;
    std::vector<real> v;
    v.reserve(static_cast<std::size_t>(n) * net.widths[l] * side * side);
    for (std::size_t s : slots) v.insert(v.end(), cache[s][l].begin(), cache[s][l].end());
    cf.cf[l] = Var::constant({n, net.widths[l], side, side}, std::move(v));
  }
  return cf;
}

}  // namespace

const char* method_name(DenoiseMethod m) {
  switch (m) {
    case DenoiseMethod::kStaged: return "staged";
    case DenoiseMethod::kUniformNoise: return "uniform-noise";
    case DenoiseMethod::kUniformMask: return "uniform-mask";
    case DenoiseMethod::kOneStepNoise: return "one-step-noise";
    case DenoiseMethod::kOneStepMask: return "one-step-mask";
  }
  return "?";
}

DenoiseMethod method_from_name(const std::string& name) {
  for (auto m : {DenoiseMethod::kStaged, DenoiseMethod::kUniformNoise, DenoiseMethod::kUniformMask,
                 DenoiseMethod::kOneStepNoise, DenoiseMethod::kOneStepMask})
    if (name == method_name(m)) return m;
  fail(ErrorCode::kInvalidArgument, "unknown denoise method '" + name +
                                        "' (expected staged, uniform-noise, uniform-mask, one-step-noise, one-step-mask)");
}

void TrainConfig::validate() const {
  check(epochs >= 1, ErrorCode::kInvalidArgument, "epochs must be >= 1");
  check(batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  check(lr > 0, ErrorCode::kInvalidArgument, "lr must be > 0");
  check(min_lr >= 0 && min_lr <= lr, ErrorCode::kInvalidArgument, "min_lr must be in [0, lr]");
  check(clip_norm > 0, ErrorCode::kInvalidArgument, "clip_norm must be > 0");
  check(policy.num_timesteps == num_timesteps, ErrorCode::kInvalidArgument,
        "policy and schedule disagree on the number of timesteps");
  check(val_every >= 0 && val_samples >= 0 && val_fanout >= 1, ErrorCode::kInvalidArgument,
        "validation settings must be nonnegative (fanout >= 1)");
  policy.validate();
}

TrainConfig full_train_config() { return TrainConfig{}; }

TrainConfig desk_train_config() {
  TrainConfig c;
  c.epochs = 30;
  c.batch_size = 8;
  c.lr = 1e-3;
  c.min_lr = 1e-5;
  return c;
}

TrainConfig desk_pretrain_config() {
  TrainConfig c = desk_train_config();
  c.epochs = 5;
  return c;
}

NetworkConfig desk_network_config() {
  NetworkConfig c;
  c.input_side = 64;
  c.widths = {8, 16, 32, 32, 32};
  c.heads = 4;
  c.time_dim = 32;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"min_lr", c.min_lr},
       {"lr_schedule", "cosine"},
       {"optimizer", {{"name", "adamw"}, {"params", c.optimizer}}},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"policy", c.policy},
       {"beta", c.beta},
       {"num_timesteps", c.num_timesteps},
       {"method", method_name(c.method)},
       {"fold", c.fold},
       {"augment", c.augment},
       {"val_every", c.val_every},
       {"val_samples", c.val_samples},
       {"val_fanout", c.val_fanout},
       {"cache_features", c.cache_features}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = c;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.min_lr = j.value("min_lr", d.min_lr);
  if (j.contains("optimizer") && j["optimizer"].contains("params")) c.optimizer = j["optimizer"]["params"].get<AdamWConfig>();
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
  if (j.contains("policy")) c.policy = j["policy"].get<StagePolicy>();
  if (j.contains("beta")) c.beta = j["beta"].get<BetaSpec>();
  c.num_timesteps = j.value("num_timesteps", d.num_timesteps);
  if (j.contains("method")) c.method = method_from_name(j["method"].get<std::string>());
  c.fold = j.value("fold", d.fold);
  c.augment = j.value("augment", d.augment);
  c.val_every = j.value("val_every", d.val_every);
  c.val_samples = j.value("val_samples", d.val_samples);
  c.val_fanout = j.value("val_fanout", d.val_fanout);
  c.cache_features = j.value("cache_features", d.cache_features);
}

TimestepDraw draw_training_timestep(Rng& rng, const TrainConfig& cfg) {
  TimestepDraw d;
  d.t_raw = rng.uniform_int(0, cfg.num_timesteps - 1);
  d.stage = stage_of(d.t_raw, cfg.policy);
  switch (cfg.method) {
    case DenoiseMethod::kStaged:
      d.t = remap_training_timestep(d.t_raw, cfg.policy);
      d.weights = loss_weights(d.stage, cfg.policy);
      break;
    case DenoiseMethod::kUniformNoise:
    case DenoiseMethod::kOneStepNoise:
      d.t = d.t_raw;
      d.weights = {1.0, 0.0};
      break;
    case DenoiseMethod::kUniformMask:
    case DenoiseMethod::kOneStepMask:
      d.t = d.t_raw;
      d.weights = {0.0, 1.0};
      break;
  }
  return d;
}

void TrainLog::write(nlohmann::json rec) {
  if (stream) *stream << rec.dump() << "\n";
  records.push_back(std::move(rec));
}

PretrainResult pretrain_cfenet(const Dataset& data, const NetworkConfig& net, const TrainConfig& cfg, TrainLog& log) {
  cfg.validate();
  net.validate();
  check(!data.records.empty(), ErrorCode::kInvalidArgument, "pretrain_cfenet: empty dataset");
  check(data.side == net.input_side, ErrorCode::kShapeMismatch,
        "dataset side " + std::to_string(data.side) + " differs from network input_side " +
            std::to_string(net.input_side));
  const auto t0 = Clock::now();
  std::vector<std::size_t> train = data.fold_indices(cfg.fold, false), val = data.fold_indices(cfg.fold, true);
  check(!train.empty(), ErrorCode::kInvalidArgument, "pretrain_cfenet: training split is empty");

  PretrainResult res;
  res.cfenet = std::make_unique<Cfenet>(net, derive_seed(cfg.seed, {0x9e7}));
  Cfenet& model = *res.cfenet;
  AdamW opt(model.params(), cfg.optimizer);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long long steps_per_epoch = static_cast<long long>((train.size() + bs - 1) / bs);
  const long long total = steps_per_epoch * cfg.epochs;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order(derive_seed(cfg.seed, {0xe90c, 0, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(train.begin(), train.end(), order.engine());
    Rng aug(derive_seed(cfg.seed, {0xa06, 0, static_cast<std::uint64_t>(epoch)}));
    double sum_dice = 0, sum_ce = 0;
    for (std::size_t b = 0; b < train.size(); b += bs) {
      Batch bt = make_batch(data, train, b, std::min(train.size(), b + bs), cfg.augment, &aug);
      const CfenetOutput o = model.forward(bt.image);
      Var ld = dice_loss_var(o.seg_logits, bt.mask01);
      Var lc = ce_loss_var(o.seg_logits, bt.mask01);
      Var loss = ops::add(ld, lc);
      check_finite_loss(loss.item(), "pretrain", step);
      opt.zero_grad();
      ag::backward(loss);
      clip_grad_norm(model.params(), cfg.clip_norm);
      opt.step(cosine_lr(cfg.lr, cfg.min_lr, step, total));
      sum_dice += ld.item();
      sum_ce += lc.item();
      ++step;
    }
    const double n = static_cast<double>(steps_per_epoch);
    nlohmann::json rec{{"phase", "pretrain"},   {"epoch", epoch},
                       {"loss", (sum_dice + sum_ce) / n}, {"l_dice", sum_dice / n},
                       {"l_ce", sum_ce / n},        {"lr", cosine_lr(cfg.lr, cfg.min_lr, step - 1, total)}};
    const bool last = epoch + 1 == cfg.epochs;
    if (!val.empty() && (last || (cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0))) {
      res.final_val_mdice = cfenet_val_mdice(data, val, model);
      rec["val_mdice"] = res.final_val_mdice;
    }
    log.write(std::move(rec));
  }
  model.set_frozen(true);
  res.wall_seconds = seconds_since(t0);
  return res;
}

DnetResult train_dnet(const Dataset& data, const Cfenet& cfenet, const TrainConfig& cfg, TrainLog& log) {
  cfg.validate();
  check(cfenet.frozen(), ErrorCode::kState, "train_dnet requires a frozen CFENet");
  check(!data.records.empty(), ErrorCode::kInvalidArgument, "train_dnet: empty dataset");
  const NetworkConfig& net = cfenet.config();
  check(data.side == net.input_side, ErrorCode::kShapeMismatch, "dataset side differs from network input_side");
  const auto t0 = Clock::now();
  const std::string cf_before = parameter_checksum(cfenet.params());
  const NoiseSchedule sched = build_schedule(cfg.num_timesteps, cfg.beta);

  std::vector<std::size_t> train = data.fold_indices(cfg.fold, false), val = data.fold_indices(cfg.fold, true);
  check(!train.empty(), ErrorCode::kInvalidArgument, "train_dnet: training split is empty");
  if (val.size() > static_cast<std::size_t>(cfg.val_samples)) val.resize(static_cast<std::size_t>(cfg.val_samples));

  // Frozen features per training record, indexed by record position.
  const bool use_cache = cfg.cache_features && !cfg.augment;
  std::vector<std::vector<std::vector<real>>> cache;
  std::vector<std::size_t> slot_of(data.records.size(), 0);
  if (use_cache) {
    std::vector<std::size_t> sorted = train;
    std::sort(sorted.begin(), sorted.end());
    cache.resize(sorted.size());
    for (std::size_t b = 0; b < sorted.size(); b += 16) {
      const std::size_t e = std::min(sorted.size(), b + 16);
      Batch bt = make_batch(data, sorted, b, e, false, nullptr);
      const CfenetOutput o = cfenet.forward(bt.image);
      for (std::size_t k = b; k < e; ++k) {
        slot_of[sorted[k]] = k;
        cache[k].resize(kLevels);
        for (int l = 0; l < kLevels; ++l) {
          const std::size_t per = o.features.cf[l].size() / (e - b);
          const auto src = o.features.cf[l].data().subspan((k - b) * per, per);
          cache[k][l].assign(src.begin(), src.end());
        }
      }
    }
  }

  DnetResult res;
  res.dnet = std::make_unique<Dnet>(net, derive_seed(cfg.seed, {0xd7e7}));
  Dnet& model = *res.dnet;
  AdamW opt(model.params(), cfg.optimizer);
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per = static_cast<std::size_t>(data.side) * data.side;
  const long long steps_per_epoch = static_cast<long long>((train.size() + bs - 1) / bs);
  const long long total = steps_per_epoch * cfg.epochs;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order(derive_seed(cfg.seed, {0xe90c, 1, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(train.begin(), train.end(), order.engine());
    Rng aug(derive_seed(cfg.seed, {0xa06, 1, static_cast<std::uint64_t>(epoch)}));
    double epoch_loss = 0;
    for (std::size_t b = 0; b < train.size(); b += bs) {
      const std::size_t e = std::min(train.size(), b + bs);
      Batch bt = make_batch(data, train, b, e, cfg.augment, &aug);
      const int n = static_cast<int>(e - b);
      ConditionalFeatures cond;
      if (use_cache) {
        std::vector<std::size_t> slots;
        for (std::size_t r : bt.records) slots.push_back(slot_of[r]);
        cond = gather_features(cache, slots, net);
      } else {
        cond = cfenet.forward(bt.image).features;
      }

      Rng rng(derive_seed(cfg.seed, {0x57e9, static_cast<std::uint64_t>(step)}));
      std::vector<TimestepDraw> draws(n);
      std::vector<int> ts(n);
      std::vector<LossWeights> weights(n);
      std::vector<real> xt(static_cast<std::size_t>(n) * per), eps(xt.size());
      for (int s = 0; s < n; ++s) {
        draws[s] = draw_training_timestep(rng, cfg);
        ts[s] = draws[s].t;
        weights[s] = draws[s].weights;
        const Field noise = rng.normal_vector(per);
        const std::span<const real> x0(bt.mask_diff.data() + s * per, per);
        const double ab = sched.alpha_bar(ts[s]);
        const double a = std::sqrt(ab), c = std::sqrt(1.0 - ab);
        for (std::size_t i = 0; i < per; ++i) {
          eps[s * per + i] = static_cast<real>(noise[i]);
          xt[s * per + i] = static_cast<real>(a * x0[i] + c * noise[i]);
        }
      }
      const DnetOutput o = model.forward(Var::constant({n, 1, data.side, data.side}, std::move(xt)), ts, cond);
      std::vector<LossBreakdown> parts;
      Var loss = weighted_dual_loss(o.eps_hat, o.x0_logits, eps, bt.mask01, weights, &parts);
      check_finite_loss(loss.item(), "train_dnet", step);
      opt.zero_grad();
      ag::backward(loss);
      const double gn = clip_grad_norm(model.params(), cfg.clip_norm);
      const double lr = cosine_lr(cfg.lr, cfg.min_lr, step, total);
      opt.step(lr);
      epoch_loss += loss.item();
      for (int s = 0; s < n; ++s)
        log.write({{"phase", "train"},
                   {"step", step},
                   {"epoch", epoch},
                   {"record", data.records[bt.records[s]].id},
                   {"t_raw", draws[s].t_raw},
                   {"t", draws[s].t},
                   {"stage", stage_name(draws[s].stage)},
                   {"l_noise", parts[s].l_noise},
                   {"l_dice", parts[s].l_dice},
                   {"l_ce", parts[s].l_ce},
                   {"total", parts[s].total},
                   {"lr", lr},
                   {"grad_norm", gn}});
      ++step;
    }
    nlohmann::json rec{{"phase", "epoch"}, {"epoch", epoch}, {"loss", epoch_loss / steps_per_epoch}};
    const bool last = epoch + 1 == cfg.epochs;
    if (!val.empty() && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last)) {
      EvalConfig ec;
      ec.sampler.fanout_per_branch = cfg.val_fanout;
      ec.sampler.seed = derive_seed(cfg.seed, {0x7a1});
      ec.sampler.t_mid_high = cfg.policy.high_threshold;
      ec.sampler.t_mid_low = cfg.policy.low_threshold;
      ec.sampler.ddim_interval = (ec.sampler.t_mid_high - ec.sampler.t_mid_low) % 30 == 0
                                     ? 30
                                     : std::max(1, (ec.sampler.t_mid_high - ec.sampler.t_mid_low) / 10);
      const EvalReport r = evaluate(data, val, cfenet, model, sched, cfg.method, ec);
      rec["val_mdice"] = r.fused.mdice;
    }
    log.write(std::move(rec));
  }
  check(parameter_checksum(cfenet.params()) == cf_before, ErrorCode::kState,
        "CFENet weights changed during DNet training");
  res.steps = step;
  res.wall_seconds = seconds_since(t0);
  return res;
}

EvalReport evaluate(const Dataset& data, const std::vector<std::size_t>& indices, const Cfenet& cfenet,
                    const Dnet& dnet, const NoiseSchedule& sched, DenoiseMethod method, const EvalConfig& cfg) {
  EvalReport rep;
  std::vector<std::size_t> idx = indices;
  if (cfg.max_samples > 0 && idx.size() > static_cast<std::size_t>(cfg.max_samples))
    idx.resize(static_cast<std::size_t>(cfg.max_samples));
  const bool staged = method == DenoiseMethod::kStaged;
  const bool one_step = method == DenoiseMethod::kOneStepMask || method == DenoiseMethod::kOneStepNoise;
  const Branch branch =
      method == DenoiseMethod::kUniformNoise || method == DenoiseMethod::kOneStepNoise ? Branch::kNoise : Branch::kMask;
  if (staged) {
    const auto c = count_network_evaluations(cfg.sampler);
    rep.trunk_steps = c.trunk;
    rep.total_calls = c.total;
  } else {
    rep.trunk_steps = rep.total_calls = one_step ? 1 : cfg.uniform_steps;
  }
  std::vector<DiceIou> fused, single;
  for (std::size_t pos = 0; pos < idx.size(); ++pos) {
    const SampleRecord& r = data.records[idx[pos]];
    NetworkDenoiser den(cfenet, dnet);
    const std::uint64_t seed = derive_seed(cfg.sampler.seed, {0xe7a1, idx[pos]});
    SampleScore sc{r.id, r.domain, {}, {}};
    if (staged) {
      SamplerConfig sc_cfg = cfg.sampler;
      sc_cfg.seed = seed;
      const EnsembleOutput ens = staged_sample(r.image, den, sched, sc_cfg);
      const BinaryMask out = cfg.fuse ? staple_fuse(ens.masks).consensus : ens.masks.front();
      sc.fused = dice_iou(out, r.mask);
      bool all_empty = true;
      for (const auto& m : ens.masks) {
        const DiceIou d = dice_iou(m, r.mask);
        sc.single.dice += d.dice / static_cast<double>(ens.masks.size());
        sc.single.iou += d.iou / static_cast<double>(ens.masks.size());
        all_empty = all_empty && d.both_empty;
      }
      sc.single.both_empty = all_empty;
    } else {
      const auto m = one_step ? one_step_sample(r.image, den, sched, branch, seed)
                              : uniform_ddim_sample(r.image, den, sched, branch, cfg.uniform_steps, seed);
      sc.fused = sc.single = dice_iou(m, r.mask);
    }
    fused.push_back(sc.fused);
    single.push_back(sc.single);
    rep.scores.push_back(std::move(sc));
  }
  rep.fused = summarize(fused, cfg.empty_policy);
  rep.single = summarize(single, cfg.empty_policy);
  return rep;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationEntry>& matrix, const Dataset& data, const Cfenet& cfenet,
                                      const EvalConfig& eval, TrainLog& log) {
  std::vector<AblationRow> rows;
  for (const auto& entry : matrix) {
    AblationRow row;
    row.name = entry.name;
    row.method = method_name(entry.train.method);
    row.high_threshold = entry.train.policy.high_threshold;
    row.low_threshold = entry.train.policy.low_threshold;
    try {
      const DnetResult dr = train_dnet(data, cfenet, entry.train, log);
      row.train_seconds = dr.wall_seconds;
      EvalConfig ec = eval;
      ec.sampler.t_mid_high = entry.train.policy.high_threshold;
      ec.sampler.t_mid_low = entry.train.policy.low_threshold;
      const int span = ec.sampler.t_mid_high - ec.sampler.t_mid_low;
      if (span % ec.sampler.ddim_interval != 0) ec.sampler.ddim_interval = std::max(1, span / 10);
      const NoiseSchedule sched = build_schedule(entry.train.num_timesteps, entry.train.beta);
      const EvalReport r = evaluate(data, data.fold_indices(entry.train.fold, true), cfenet, *dr.dnet, sched,
                                    entry.train.method, ec);
      row.mdice = r.fused.mdice;
      row.miou = r.fused.miou;
      row.single_mdice = r.single.mdice;
      row.infer_steps = r.trunk_steps;
      row.total_calls = r.total_calls;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    log.write({{"phase", "ablation"}, {"name", row.name}, {"ok", row.ok}, {"mdice", row.mdice}, {"error", row.error}});
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json ablation_table(const std::vector<AblationRow>& rows) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& r : rows)
    t.push_back({{"name", r.name},
                 {"method", r.method},
                 {"high_threshold", r.high_threshold},
                 {"low_threshold", r.low_threshold},
                 {"ok", r.ok},
                 {"error", r.error},
                 {"mdice", r.mdice},
                 {"miou", r.miou},
                 {"single_mdice", r.single_mdice},
                 {"infer_steps", r.infer_steps},
                 {"total_calls", r.total_calls},
                 {"train_seconds", r.train_seconds}});
  return t;
}

}  // namespace stagediff
