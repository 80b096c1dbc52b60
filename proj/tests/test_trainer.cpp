// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>
#include <sstream>

#include "doctest.h"
#include "stagediff/error.hpp"
#include "stagediff/random.hpp"
#include "tiny.hpp"

using namespace stagediff;

namespace {

struct Trained {
  std::unique_ptr<Cfenet> cfenet;
  std::unique_ptr<Dnet> dnet;
  TrainLog pre_log, log;
};

Trained train_tiny(const Dataset& data, DenoiseMethod method, std::uint64_t seed) {
  Trained r;
  TrainConfig cfg = tiny::train(seed);
  cfg.epochs = 1;
  r.cfenet = pretrain_cfenet(data, tiny::network(), cfg, r.pre_log).cfenet;
  cfg.method = method;
  cfg.epochs = 2;
  r.dnet = train_dnet(data, *r.cfenet, cfg, r.log).dnet;
  return r;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("stage visitation frequencies") {
    TrainConfig cfg;
    Rng rng(1);
    int counts[3] = {0, 0, 0};
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
      const TimestepDraw d = draw_training_timestep(rng, cfg);
      ++counts[static_cast<int>(d.stage)];
      CHECK((d.t == 999 || d.t == 0 || (d.t > 299 && d.t <= 599)));
    }
    CHECK(counts[static_cast<int>(Stage::kRapidSegmentation)] / double(n) == doctest::Approx(0.4).epsilon(0.05));
    CHECK(counts[static_cast<int>(Stage::kProbabilisticModeling)] / double(n) == doctest::Approx(0.3).epsilon(0.067));
    CHECK(counts[static_cast<int>(Stage::kDenoisingRefinement)] / double(n) == doctest::Approx(0.3).epsilon(0.067));
  }

  TEST_CASE("ablation methods keep t and a single target") {
    Rng rng(2);
    TrainConfig cfg;
    cfg.method = DenoiseMethod::kUniformNoise;
    std::set<int> ts;
    for (int i = 0; i < 2000; ++i) {
      const TimestepDraw d = draw_training_timestep(rng, cfg);
      CHECK(d.t == d.t_raw);
      CHECK(d.weights.alpha == 1.0);
      CHECK(d.weights.beta == 0.0);
      ts.insert(d.t);
    }
    CHECK(ts.size() > 500);
    cfg.method = DenoiseMethod::kOneStepMask;
    const TimestepDraw d = draw_training_timestep(rng, cfg);
    CHECK(d.weights.alpha == 0.0);
    CHECK(d.weights.beta == 1.0);
    for (const char* m : {"staged", "uniform-noise", "uniform-mask", "one-step-noise", "one-step-mask"})
      CHECK(std::string(method_name(method_from_name(m))) == m);
    CHECK_THROWS_AS(method_from_name("two-step"), Error);
  }

  TEST_CASE("staged training logs, freezes the extractor and is reproducible") {
    const Dataset data = generate_synthetic(tiny::synth());
    Trained a = train_tiny(data, DenoiseMethod::kStaged, 7);
    int steps = 0;
    for (const auto& r : a.log.records) {
      if (r["phase"] != "train") continue;
      ++steps;
      const int t = r["t"];
      CHECK((t == 999 || t == 0 || (t > 299 && t <= 599)));
      CHECK(r.contains("l_noise"));
      CHECK(r.contains("l_dice"));
      CHECK(r.contains("l_ce"));
      CHECK(r.contains("stage"));
    }
    CHECK(steps == 2 * static_cast<int>(data.fold_indices(0, false).size()));
    CHECK(a.cfenet->frozen());
    Trained b = train_tiny(data, DenoiseMethod::kStaged, 7);
    CHECK(parameter_checksum(a.dnet->params()) == parameter_checksum(b.dnet->params()));
    REQUIRE(a.log.records.size() == b.log.records.size());
    for (std::size_t i = 0; i < a.log.records.size(); ++i) {
      nlohmann::json x = a.log.records[i], y = b.log.records[i];
      x.erase("wall_seconds");
      y.erase("wall_seconds");
      CHECK(x == y);
    }
    Trained c = train_tiny(data, DenoiseMethod::kStaged, 8);
    CHECK(parameter_checksum(a.dnet->params()) != parameter_checksum(c.dnet->params()));
  }

  TEST_CASE("training requires a frozen extractor") {
    const Dataset data = generate_synthetic(tiny::synth());
    Cfenet cf(tiny::network(), 0);
    TrainLog log;
    CHECK_THROWS_AS(train_dnet(data, cf, tiny::train(), log), Error);
  }

  TEST_CASE("log stream receives one JSON object per line") {
    const Dataset data = generate_synthetic(tiny::synth());
    std::ostringstream os;
    TrainLog log;
    log.stream = &os;
    TrainConfig cfg = tiny::train();
    cfg.epochs = 1;
    pretrain_cfenet(data, tiny::network(), cfg, log);
    std::istringstream is(os.str());
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
      CHECK(nlohmann::json::parse(line).is_object());
      ++n;
    }
    CHECK(n == static_cast<int>(log.records.size()));
  }

  TEST_CASE("evaluation and ablation bookkeeping") {
    const Dataset data = generate_synthetic(tiny::synth());
    Trained t = train_tiny(data, DenoiseMethod::kStaged, 1);
    const NoiseSchedule s = build_schedule(1000);
    EvalConfig ec;
    ec.max_samples = 2;
    ec.sampler.fanout_per_branch = 2;
    const auto idx = data.fold_indices(0, true);
    const EvalReport staged = evaluate(data, idx, *t.cfenet, *t.dnet, s, DenoiseMethod::kStaged, ec);
    CHECK(staged.scores.size() == 2);
    CHECK(staged.trunk_steps == 11);
    const EvalReport one = evaluate(data, idx, *t.cfenet, *t.dnet, s, DenoiseMethod::kOneStepMask, ec);
    CHECK(one.trunk_steps == 1);
    for (const auto& sc : one.scores) CHECK(sc.single.dice == sc.fused.dice);
    ec.uniform_steps = 5;
    CHECK(evaluate(data, idx, *t.cfenet, *t.dnet, s, DenoiseMethod::kUniformMask, ec).trunk_steps == 5);

    TrainConfig row = tiny::train(1);
    row.epochs = 1;
    TrainConfig broken = row;
    broken.policy.low_threshold = 800;
    TrainLog log;
    const auto rows = run_ablation({{"ok", row}, {"broken", broken}}, data, *t.cfenet, ec, log);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].ok);
    CHECK_FALSE(rows[1].ok);
    CHECK_FALSE(rows[1].error.empty());
    CHECK(ablation_table(rows).size() == 2);
  }

  TEST_CASE("config validation names the field") {
    TrainConfig c = desk_train_config();
    c.min_lr = 1.0;
    try {
      c.validate();
      FAIL("expected failure");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("min_lr") != std::string::npos);
    }
    nlohmann::json j = full_train_config();
    CHECK(j["epochs"] == 300);
    CHECK(j["batch_size"] == 64);
    CHECK(j["lr"] == doctest::Approx(1e-4));
  }
}
