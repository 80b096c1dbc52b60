// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner. Each invocation checks one criterion and prints a single
// "criterion N: PASS|FAIL" line; the exit status is 0 only on PASS.
//
//   acceptance --criterion 1..8
//   acceptance --criterion 5 --seed S --work DIR      (one seed, writes DIR/c5_S.json)
//   acceptance --criterion 5 --aggregate --work DIR   (reads the three seed files)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "stagediff/checkpoint.hpp"
#include "stagediff/data.hpp"
#include "stagediff/diagnostics.hpp"
#include "stagediff/fusion.hpp"
#include "stagediff/hash.hpp"
#include "stagediff/losses.hpp"
#include "stagediff/random.hpp"
#include "stagediff/sampler.hpp"
#include "stagediff/schedule.hpp"
#include "stagediff/stage_policy.hpp"
#include "stagediff/trainer.hpp"

using namespace stagediff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string hash_bytes(const void* p, std::size_t n) {
  return sha256_hex(std::string_view(static_cast<const char*>(p), n));
}

// 1 ------------------------------------------------------------------------

Verdict schedule_algebra(json& artifacts) {
  Verdict v;
  Rng rng(20260101);
  double worst = 0;
  for (int c = 0; c < 1000; ++c) {
    const int T = rng.uniform_int(20, 1000);
    BetaSpec spec;
    spec.beta_start = rng.uniform(1e-5, 1e-3);
    spec.beta_end = rng.uniform(5e-3, 0.03);
    const NoiseSchedule s = build_schedule(T, spec);
    // Cumulative product oracle.
    double ab = 1;
    for (int t = 0; t < T; ++t) {
      ab *= 1.0 - (spec.beta_start + (spec.beta_end - spec.beta_start) * t / (T - 1));
      worst = std::max(worst, std::abs(s.alpha_bar(t) - ab));
    }
    const int n = rng.uniform_int(1, 64);
    Field x0(n);
    for (auto& x : x0) x = rng.uniform(-1, 1);
    const Field eps = rng.normal_vector(n);
    const int t = rng.uniform_int(1, T - 1);
    const int t_next = rng.uniform_int(0, t - 1);
    const NoisySample ns = add_noise(x0, t, eps, s);
    const Field x0r = x0_from_eps(ns.x_t, eps, t, s);
    const Field epr = eps_from_x0(ns.x_t, x0, t, s);
    const Field step = ddim_step(ns.x_t, x0, eps, t, t_next, s, 0.0, nullptr);
    // Index 0 of a DDIM step is the clean sample.
    const Field want = t_next == 0 ? x0 : add_noise(x0, t_next, eps, s).x_t;
    for (int i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(x0r[i] - x0[i]));
      worst = std::max(worst, std::abs(epr[i] - eps[i]));
      worst = std::max(worst, std::abs(step[i] - want[i]));
    }
  }
  v.require(worst <= 1e-5, "max error " + fmt("%.3g", worst));
  artifacts["max_error"] = worst;
  v.detail = v.pass ? "1000 cases, max error " + fmt("%.2e", worst) : v.detail;
  return v;
}

// 2 ------------------------------------------------------------------------

Verdict stage_policy_check() {
  Verdict v;
  const StagePolicy p;
  for (int t = 0; t < 1000; ++t) {
    const Stage want = t <= 299 ? Stage::kDenoisingRefinement
                       : t <= 599 ? Stage::kProbabilisticModeling
                                  : Stage::kRapidSegmentation;
    v.require(stage_of(t, p) == want, "stage_of(" + std::to_string(t) + ")");
    const int r = remap_training_timestep(t, p);
    v.require(r == 999 || r == 0 || (r > 299 && r <= 599), "remap(" + std::to_string(t) + ") = " + std::to_string(r));
    if (want == Stage::kProbabilisticModeling) v.require(r == t, "probabilistic timesteps are kept");
  }
  auto w = [&](Stage s) { return loss_weights(s, p); };
  v.require(w(Stage::kRapidSegmentation).alpha == 1 && w(Stage::kRapidSegmentation).beta == 3, "rapid weights");
  v.require(w(Stage::kProbabilisticModeling).alpha == 1 && w(Stage::kProbabilisticModeling).beta == 1,
            "probabilistic weights");
  v.require(w(Stage::kDenoisingRefinement).alpha == 3 && w(Stage::kDenoisingRefinement).beta == 1,
            "refinement weights");
  if (v.pass) v.detail = "1000 timesteps, boundaries 299/599, weights 1:3 / 1:1 / 3:1";
  return v;
}

// 3 ------------------------------------------------------------------------

Verdict staple_oracle() {
  Verdict v;
  Rng rng(77);
  double worst = 0, worst_drop = 0;
  for (int c = 0; c < 50; ++c) {
    const int w = rng.uniform_int(1, 16), h = rng.uniform_int(1, 16), J = rng.uniform_int(1, 20);
    const std::size_t N = static_cast<std::size_t>(w) * h;
    std::vector<std::uint8_t> base(N);
    const double fill = rng.uniform(0.1, 0.9);
    for (auto& b : base) b = rng.uniform() < fill;
    std::vector<BinaryMask> masks(J, BinaryMask(N));
    std::vector<std::vector<std::uint8_t>> plain(J);
    for (int j = 0; j < J; ++j) {
      const double flip = rng.uniform(0.0, 0.4);
      for (std::size_t i = 0; i < N; ++i) masks[j][i] = base[i] ^ (rng.uniform() < flip);
      plain[j].assign(masks[j].begin(), masks[j].end());
    }
    StapleConfig cfg;
    cfg.iterations = 20;
    const StapleResult r = staple_fuse(masks, cfg);
    const oracle::Staple o = oracle::staple(plain, cfg.alpha0, cfg.beta0, cfg.prior, cfg.iterations);
    for (std::size_t i = 0; i < N; ++i) worst = std::max(worst, std::abs(r.state.posterior[i] - o.w[i]));
    const auto& ll = r.state.log_likelihood;
    for (std::size_t k = 1; k < ll.size(); ++k) worst_drop = std::max(worst_drop, ll[k - 1] - ll[k]);
  }
  v.require(worst <= 1e-10, "posterior differs by " + fmt("%.3g", worst));
  v.require(worst_drop <= 1e-8, "log-likelihood dropped by " + fmt("%.3g", worst_drop));
  if (v.pass)
    v.detail = "50 ensembles, max posterior error " + fmt("%.2e", worst) + ", log-likelihood nondecreasing";
  return v;
}

// 4 ------------------------------------------------------------------------

Verdict sampler_structure(json& artifacts) {
  Verdict v;
  const NoiseSchedule s = build_schedule(1000);
  const int side = 32;
  const auto gt = oracle::disk(side, 9);
  const Field x0 = to_diffusion_domain(std::vector<float>(gt.begin(), gt.end()));
  const std::vector<float> image(side * side, 0.0f);

  OracleDenoiser plain(x0, s, side);
  SamplerConfig cfg;
  cfg.seed = 11;
  const EnsembleOutput out = staged_sample(image, plain, s, cfg);
  v.require(out.masks.size() == 20, "expected 20 masks");
  int tagged = 0;
  for (const auto& p : out.provenance) tagged += p.trunk == Trunk::kMask;
  v.require(tagged == 10, "10 masks per trunk");
  std::vector<int> want_ts;
  for (int t = 599; t >= 299; t -= 30) want_ts.push_back(t);
  v.require(out.trunk_timesteps == want_ts, "trunk timesteps");
  const EvaluationCount c = count_network_evaluations(cfg);
  v.require(c.trunk == 11, "trunk evaluation count " + std::to_string(c.trunk));
  v.require(c.total == 41 && out.network_calls == 41, "total network calls");
  v.require(plain.feature_calls() == 1, "features computed once");

  Rng rng(5);
  const Field eps = rng.normal_vector(x0.size());
  OracleDenoiser den(x0, s, side);
  const EnsembleOutput landed = staged_sample(image, den, s, cfg, add_noise(x0, 999, eps, s).x_t);
  const Field want = add_noise(x0, 299, eps, s).x_t;
  double worst = 0;
  for (std::size_t i = 0; i < want.size(); ++i)
    worst = std::max({worst, std::abs(landed.trunk_mask[i] - want[i]), std::abs(landed.trunk_noise[i] - want[i])});
  v.require(worst <= 1e-5, "trunk landing error " + fmt("%.3g", worst));
  for (const auto& m : landed.masks) v.require(std::vector<std::uint8_t>(m.begin(), m.end()) == gt, "refined mask");

  std::string bytes;
  for (const auto& m : out.masks) bytes.append(m.begin(), m.end());
  for (const auto& f : out.finals) bytes.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(double));
  artifacts["ensemble_sha256"] = sha256_hex(bytes);
  artifacts["trunk_mask_sha256"] = hash_bytes(landed.trunk_mask.data(), landed.trunk_mask.size() * sizeof(double));
  if (v.pass) v.detail = "20 masks, trunk 11, total 41, landing error " + fmt("%.2e", worst);
  return v;
}

// 5 ------------------------------------------------------------------------

struct ToyResult {
  double staged_fused = 0, staged_single = 0, one_step = 0;
  double pretrain_seconds = 0, staged_seconds = 0, one_step_seconds = 0;
};

ToyResult toy_task(const SynthConfig& sc, const NetworkConfig& net, TrainConfig pre, TrainConfig train,
                   int max_samples, json* artifacts) {
  const Dataset data = generate_synthetic(sc);
  TrainLog log;
  PretrainResult pr = pretrain_cfenet(data, net, pre, log);
  ToyResult r;
  r.pretrain_seconds = pr.wall_seconds;
  const NoiseSchedule sched = build_schedule(train.policy.num_timesteps, train.beta);
  const auto eval_idx = data.fold_indices(train.fold, true);
  EvalConfig ec;
  ec.max_samples = max_samples;
  ec.sampler.seed = train.seed;

  train.method = DenoiseMethod::kStaged;
  DnetResult staged = train_dnet(data, *pr.cfenet, train, log);
  r.staged_seconds = staged.wall_seconds;
  const EvalReport es = evaluate(data, eval_idx, *pr.cfenet, *staged.dnet, sched, DenoiseMethod::kStaged, ec);
  r.staged_fused = es.fused.mdice;
  r.staged_single = es.single.mdice;

  train.method = DenoiseMethod::kOneStepMask;
  DnetResult one = train_dnet(data, *pr.cfenet, train, log);
  r.one_step_seconds = one.wall_seconds;
  const EvalReport eo = evaluate(data, eval_idx, *pr.cfenet, *one.dnet, sched, DenoiseMethod::kOneStepMask, ec);
  r.one_step = eo.fused.mdice;

  if (artifacts) {
    ModelBundle mb;
    mb.network = net;
    mb.schedule = sched;
    mb.cfenet = std::move(pr.cfenet);
    mb.dnet = std::move(staged.dnet);
    const fs::path ck = fs::temp_directory_path() / ("stagediff_accept_" + std::to_string(::getpid()) + ".ckpt");
    save_model(ck.string(), mb);
    (*artifacts)["checkpoint_sha256"] = sha256_file(ck.string());
    fs::remove(ck);
    json scores = json::array();
    for (const auto& s : es.scores) scores.push_back({s.id, s.fused.dice, s.single.dice});
    for (const auto& s : eo.scores) scores.push_back({s.id, s.fused.dice});
    (*artifacts)["scores_sha256"] = sha256_hex(scores.dump());
  }
  return r;
}

json toy_seed(std::uint64_t seed) {
  SynthConfig sc;  // 6 domains x 100 samples at 64 x 64
  sc.seed = seed;
  TrainConfig pre = desk_pretrain_config();
  pre.seed = seed;
  TrainConfig train = desk_train_config();
  train.seed = seed;
  train.val_every = 0;
  const ToyResult r = toy_task(sc, desk_network_config(), pre, train, 0, nullptr);
  return {{"seed", seed},
          {"staged_fused", r.staged_fused},
          {"staged_single", r.staged_single},
          {"one_step_mask", r.one_step},
          {"pretrain_seconds", r.pretrain_seconds},
          {"staged_train_seconds", r.staged_seconds},
          {"one_step_train_seconds", r.one_step_seconds},
          {"epochs", train.epochs}};
}

Verdict toy_aggregate(const fs::path& work) {
  Verdict v;
  double fused = 0, single = 0, one = 0, budget = 0;
  int n = 0;
  for (int seed = 0; seed < 3; ++seed) {
    std::ifstream in(work / ("c5_" + std::to_string(seed) + ".json"));
    if (!in) {
      v.require(false, "missing result for seed " + std::to_string(seed));
      continue;
    }
    const json j = json::parse(in);
    fused += j["staged_fused"].get<double>();
    single += j["staged_single"].get<double>();
    one += j["one_step_mask"].get<double>();
    budget = std::max(budget, j["pretrain_seconds"].get<double>() + j["staged_train_seconds"].get<double>());
    ++n;
  }
  if (n == 3) {
    fused /= 3, single /= 3, one /= 3;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "fused %.4f (>= 0.80), single %.4f (margin %+.4f), one-step-mask %.4f (margin %+.4f), "
                  "longest staged budget %.0f s",
                  fused, single, fused - single, one, fused - one, budget);
    v.require(budget <= 2 * 3600, "training budget exceeded");
    v.require(fused >= 0.80, "");
    v.require(fused - single >= 0.01, "");
    v.require(fused - one >= 0.01, "");
    v.detail = buf;
  }
  return v;
}

// 6 ------------------------------------------------------------------------

Verdict fusion_gain(json& artifacts) {
  Verdict v;
  const int side = 48;
  const auto disk = oracle::disk(side, 13);
  double min_gain = 1e9;
  std::string bytes;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    std::vector<BinaryMask> masks(20, BinaryMask(disk.size()));
    double best = 0;
    for (auto& m : masks) {
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = disk[i] ^ (rng.uniform() < 0.1);
      best = std::max(best, oracle::dice(std::vector<std::uint8_t>(m.begin(), m.end()), disk));
    }
    const StapleResult r = staple_fuse(masks);
    const double d = oracle::dice(std::vector<std::uint8_t>(r.consensus.begin(), r.consensus.end()), disk);
    min_gain = std::min(min_gain, d - best);
    v.require(d >= best, "seed " + std::to_string(seed) + ": consensus " + fmt("%.4f", d) + " < best");
    bytes.append(r.consensus.begin(), r.consensus.end());
  }
  Rng rng(9);
  for (int c = 0; c < 10; ++c) {
    const int n = rng.uniform_int(2, 400);
    BinaryMask m(n);
    // An all-foreground ensemble is left out: no rater ever says background,
    // so the false-positive rate is unidentifiable and the posterior sits at 0.5.
    const double fill = c == 0 ? 0.0 : rng.uniform(0.05, 0.95);
    for (auto& x : m) x = rng.uniform() < fill;
    if (c > 0) m[0] = 0, m[n - 1 < 1 ? 0 : n - 1] = 1;
    const std::vector<BinaryMask> masks(rng.uniform_int(1, 20), m);
    v.require(staple_fuse(masks).consensus == m, "unanimous ensemble not reproduced");
  }
  artifacts["consensus_sha256"] = sha256_hex(bytes);
  if (v.pass) v.detail = "20 corruptions, min gain over best member " + fmt("%+.4f", min_gain) + ", unanimity exact";
  return v;
}

// 7 ------------------------------------------------------------------------

Verdict diagnostics_direction() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  SynthConfig sc;
  const Dataset data = generate_synthetic(sc);
  TrainLog log;
  TrainConfig pre = desk_pretrain_config();
  pre.val_every = 0;
  const auto cf = pretrain_cfenet(data, desk_network_config(), pre, log).cfenet;
  std::string detail;
  for (int seed = 0; seed < 3; ++seed) {
    double g[2][2];
    for (int tgt = 0; tgt < 2; ++tgt) {
      ProfileConfig pc;
      pc.target = tgt ? ProfileTarget::kMask : ProfileTarget::kNoise;
      pc.steps = 300;
      pc.seed = static_cast<std::uint64_t>(seed);
      const AttentionProfile p = profile_gradients(data, *cf, pc);
      g[tgt][0] = p.group_mean(0, 299);
      g[tgt][1] = p.group_mean(700, 999);
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "%sseed %d noise %.3f/%.3f mask %.3f/%.3f", seed ? "; " : "", seed, g[0][0],
                  g[0][1], g[1][0], g[1][1]);
    detail += buf;
    v.require(g[0][0] > g[0][1], "seed " + std::to_string(seed) + ": noise target not low-t dominated");
    v.require(g[1][1] > g[1][0], "seed " + std::to_string(seed) + ": mask target not high-t dominated");
  }
  const double secs = seconds_since(t0);
  v.require(secs < 15 * 60, "runtime " + fmt("%.0f s", secs));
  v.detail = (v.pass ? "" : v.detail + " | ") + "low/high group means: " + detail + fmt(", %.0f s", secs);
  return v;
}

// 8 ------------------------------------------------------------------------

json determinism_manifest() {
  json m;
  json a4, a6, a5;
  sampler_structure(a4);
  fusion_gain(a6);
  SynthConfig sc;
  sc.samples_per_domain = 6;
  sc.side = 32;
  sc.seed = 4;
  NetworkConfig net;
  net.input_side = 32;
  net.widths = {4, 8, 8, 8, 8};
  net.heads = 2;
  net.time_dim = 8;
  TrainConfig pre = desk_pretrain_config();
  pre.epochs = 1;
  pre.batch_size = 4;
  pre.seed = 4;
  pre.val_every = 0;
  TrainConfig train = pre;
  train.epochs = 2;
  const ToyResult r = toy_task(sc, net, pre, train, 4, &a5);
  a5["staged_fused"] = r.staged_fused;
  a5["one_step_mask"] = r.one_step;
  m["criterion4"] = a4;
  m["criterion5_reduced"] = a5;
  m["criterion6"] = a6;
  return m;
}

Verdict determinism() {
  Verdict v;
  const json a = determinism_manifest();
  const json b = determinism_manifest();
  const std::string ha = sha256_hex(a.dump()), hb = sha256_hex(b.dump());
  for (const auto& [k, val] : a.items()) v.require(val == b[k], k + " artifacts differ");
  v.require(ha == hb, "manifest checksums differ");
  if (v.pass) v.detail = "two runs, manifest sha256 " + ha.substr(0, 16);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagediff acceptance checks"};
  int criterion = 0;
  std::uint64_t seed = 0;
  bool aggregate = false;
  std::string work = ".";
  app.add_option("--criterion", criterion, "Criterion number")->required()->check(CLI::Range(1, 8));
  app.add_option("--seed", seed, "Seed for a single criterion-5 run");
  app.add_flag("--aggregate", aggregate, "Combine the criterion-5 seed results");
  app.add_option("--work", work, "Directory for criterion-5 results");
  CLI11_PARSE(app, argc, argv);

  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  json scratch;
  try {
    switch (criterion) {
      case 1:
        v = schedule_algebra(scratch);
        v.require(seconds_since(t0) < 10, "runtime over 10 s");
        break;
      case 2:
        v = stage_policy_check();
        v.require(seconds_since(t0) < 1, "runtime over 1 s");
        break;
      case 3:
        v = staple_oracle();
        v.require(seconds_since(t0) < 30, "runtime over 30 s");
        break;
      case 4:
        v = sampler_structure(scratch);
        v.require(seconds_since(t0) < 20, "runtime over 20 s");
        break;
      case 5:
        if (!aggregate) {
          const json r = toy_seed(seed);
          fs::create_directories(work);
          std::ofstream(fs::path(work) / ("c5_" + std::to_string(seed) + ".json")) << r.dump(2) << "\n";
          std::printf("criterion 5 seed %llu: done (staged fused %.4f, single %.4f, one-step-mask %.4f)\n",
                      static_cast<unsigned long long>(seed), r["staged_fused"].get<double>(),
                      r["staged_single"].get<double>(), r["one_step_mask"].get<double>());
          return 0;
        }
        v = toy_aggregate(work);
        break;
      case 6:
        v = fusion_gain(scratch);
        break;
      case 7:
        v = diagnostics_direction();
        break;
      case 8:
        v = determinism();
        break;
    }
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("error: ") + e.what();
  }
  std::printf("criterion %d: %s (%s; %.2f s)\n", criterion, v.pass ? "PASS" : "FAIL", v.detail.c_str(),
              seconds_since(t0));
  return v.pass ? 0 : 1;
}
