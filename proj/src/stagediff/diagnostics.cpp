// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "stagediff/error.hpp"
#include "stagediff/losses.hpp"
#include "stagediff/optim.hpp"
#include "stagediff/random.hpp"

namespace stagediff {

namespace {

struct Example {
  Var x_t;
  std::vector<int> ts;
  ConditionalFeatures cond;
  std::vector<real> eps, mask01;
};

Example make_example(const Dataset& data, const std::vector<std::size_t>& recs, const std::vector<int>& ts,
                     const Cfenet& cfenet, const NoiseSchedule& sched, Rng& rng) {
  const int s = data.side;
  const std::size_t per = static_cast<std::size_t>(s) * s;
  const int n = static_cast<int>(recs.size());
  Example ex;
  ex.ts = ts;
  std::vector<real> img, xt(n * per);
  ex.eps.resize(n * per);
  for (int k = 0; k < n; ++k) {
    const SampleRecord& r = data.records[recs[k]];
    img.insert(img.end(), r.image.begin(), r.image.end());
    const Field noise = rng.normal_vector(per);
    const double ab = sched.alpha_bar(ts[k]);
    for (std::size_t i = 0; i < per; ++i) {
      const double x0 = r.mask[i] ? 1.0 : -1.0;
      ex.mask01.push_back(r.mask[i] ? real(1) : real(0));
      ex.eps[k * per + i] = static_cast<real>(noise[i]);
      xt[k * per + i] = static_cast<real>(std::sqrt(ab) * x0 + std::sqrt(1 - ab) * noise[i]);
    }
  }
  ex.cond = cfenet.forward(Var::constant({n, 1, s, s}, std::move(img))).features;
  ex.x_t = Var::constant({n, 1, s, s}, std::move(xt));
  return ex;
}

Var target_loss(const Dnet& dnet, const Example& ex, ProfileTarget target) {
  const DnetOutput o = dnet.forward(ex.x_t, ex.ts, ex.cond);
  const LossWeights w = target == ProfileTarget::kNoise ? LossWeights{1, 0} : LossWeights{0, 1};
  return weighted_dual_loss(o.eps_hat, o.x0_logits, ex.eps, ex.mask01,
                            std::vector<LossWeights>(ex.ts.size(), w));
}

}  // namespace

const char* target_name(ProfileTarget t) { return t == ProfileTarget::kNoise ? "noise" : "mask"; }

ProfileTarget target_from_name(const std::string& name) {
  if (name == "noise") return ProfileTarget::kNoise;
  if (name == "mask") return ProfileTarget::kMask;
  fail(ErrorCode::kInvalidArgument, "unknown profile target '" + name + "' (expected noise or mask)");
}

double AttentionProfile::group_mean(int lo, int hi) const {
  double s = 0;
  int n = 0;
  for (std::size_t b = 0; b < grad_mean.size(); ++b)
    if (!empty[b] && bin_lo[b] >= lo && bin_hi[b] <= hi) {
      s += grad_mean[b];
      ++n;
    }
  check(n > 0, ErrorCode::kInvalidArgument, "no populated bins inside the requested range");
  return s / n;
}

AttentionProfile profile_gradients(const Dataset& data, const Cfenet& cfenet, const ProfileConfig& cfg) {
  check(cfg.bins >= 1 && cfg.bins <= cfg.num_timesteps, ErrorCode::kInvalidArgument, "bins must be in [1, T]");
  check(cfg.steps >= cfg.bins, ErrorCode::kInvalidArgument,
        "profile steps (" + std::to_string(cfg.steps) + ") must be >= bins (" + std::to_string(cfg.bins) +
            ") so that no bin is empty");
  check(cfg.warmup_steps >= 0 && cfg.warmup_batch >= 1, ErrorCode::kInvalidArgument, "invalid warmup settings");
  check(cfenet.frozen(), ErrorCode::kState, "profile_gradients requires a frozen CFENet");
  const auto train = data.fold_indices(cfg.fold, false);
  check(!train.empty(), ErrorCode::kInvalidArgument, "profile_gradients: empty training split");
  const NoiseSchedule sched = build_schedule(cfg.num_timesteps, cfg.beta);
  const int T = cfg.num_timesteps;

  Dnet dnet(cfenet.config(), derive_seed(cfg.seed, {0xd1a9}));
  AdamW opt(dnet.params(), AdamWConfig{cfg.lr});
  Rng rng(derive_seed(cfg.seed, {0xd1a9, 1}));
  for (int step = 0; step < cfg.warmup_steps; ++step) {
    std::vector<std::size_t> recs;
    std::vector<int> ts;
    for (int k = 0; k < cfg.warmup_batch; ++k) {
      recs.push_back(train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(train.size()) - 1))]);
      ts.push_back(rng.uniform_int(0, T - 1));
    }
    const Example ex = make_example(data, recs, ts, cfenet, sched, rng);
    Var loss = target_loss(dnet, ex, cfg.target);
    check(std::isfinite(loss.item()), ErrorCode::kNumeric, "non-finite warmup loss at step " + std::to_string(step));
    opt.zero_grad();
    ag::backward(loss);
    clip_grad_norm(dnet.params(), 1.0);
    opt.step(cfg.lr);
  }

  AttentionProfile p;
  p.target = cfg.target;
  p.warmup_steps = cfg.warmup_steps;
  p.seed = cfg.seed;
  for (int b = 0; b < cfg.bins; ++b) {
    p.bin_lo.push_back(static_cast<int>(static_cast<long long>(b) * T / cfg.bins));
    p.bin_hi.push_back(static_cast<int>(static_cast<long long>(b + 1) * T / cfg.bins) - 1);
  }
  std::vector<double> sums(cfg.bins, 0);
  p.counts.assign(cfg.bins, 0);
  for (int step = 0; step < cfg.steps; ++step) {
    const int b = step % cfg.bins;
    const int t = rng.uniform_int(p.bin_lo[b], p.bin_hi[b]);
    const std::size_t rec = train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(train.size()) - 1))];
    const Example ex = make_example(data, {rec}, {t}, cfenet, sched, rng);
    Var loss = target_loss(dnet, ex, cfg.target);
    opt.zero_grad();
    ag::backward(loss);
    sums[b] += grad_norm(dnet.params());
    ++p.counts[b];
  }
  for (int b = 0; b < cfg.bins; ++b) {
    p.empty.push_back(p.counts[b] == 0);
    p.grad_mean.push_back(p.counts[b] ? sums[b] / p.counts[b] : 0.0);
  }
  return p;
}

void export_profile(const AttentionProfile& p, const std::string& path) {
  std::ofstream out(path);
  check(out.good(), ErrorCode::kIo, "cannot write profile " + path);
  out << "target,bin,t_lo,t_hi,grad_mean,count,empty,warmup_steps,seed\n";
  char buf[64];
  for (std::size_t b = 0; b < p.grad_mean.size(); ++b) {
    std::snprintf(buf, sizeof buf, "%.17g", p.grad_mean[b]);
    out << target_name(p.target) << "," << b << "," << p.bin_lo[b] << "," << p.bin_hi[b] << "," << buf << ","
        << p.counts[b] << "," << (p.empty[b] ? 1 : 0) << "," << p.warmup_steps << "," << p.seed << "\n";
  }
  check(out.good(), ErrorCode::kIo, "write failed: " + path);
}

AttentionProfile import_profile(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), ErrorCode::kIo, "cannot read profile " + path);
  std::string line;
  std::getline(in, line);
  check(line.rfind("target,bin,", 0) == 0, ErrorCode::kFormat, path + ": not a profile CSV");
  AttentionProfile p;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[9];
    for (auto& x : f) std::getline(ss, x, ',');
    try {
      p.target = target_from_name(f[0]);
      p.bin_lo.push_back(std::stoi(f[2]));
      p.bin_hi.push_back(std::stoi(f[3]));
      p.grad_mean.push_back(std::stod(f[4]));
      p.counts.push_back(std::stoi(f[5]));
      p.empty.push_back(f[6] == "1");
      p.warmup_steps = std::stoi(f[7]);
      p.seed = std::stoull(f[8]);
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormat, path + ": malformed row: " + line);
    }
  }
  return p;
}

}  // namespace stagediff
