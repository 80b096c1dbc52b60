// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "stagediff/checkpoint.hpp"
#include "stagediff/error.hpp"
#include "stagediff/networks.hpp"
#include "stagediff/ops.hpp"
#include "stagediff/random.hpp"
#include "tiny.hpp"

using namespace stagediff;
namespace fs = std::filesystem;

namespace {

Var random_image(int n, int side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<real> v(static_cast<std::size_t>(n) * side * side);
  for (auto& x : v) x = static_cast<real>(rng.uniform(-1, 1));
  return Var::constant({n, 1, side, side}, std::move(v));
}

Var random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<real> v(numel(shape));
  for (auto& x : v) x = static_cast<real>(rng.normal());
  return Var::constant(std::move(shape), std::move(v));
}

}  // namespace

TEST_SUITE("networks") {
  TEST_CASE("feature pyramid shapes") {
    const NetworkConfig cfg = tiny::network();
    Cfenet cf(cfg, 0);
    const CfenetOutput o = cf.forward(random_image(2, 32, 1));
    for (int i = 0; i < kLevels; ++i) CHECK(o.features.cf[i].shape() == Shape{2, cfg.widths[i], 32 >> i, 32 >> i});
    CHECK(o.seg_logits.shape() == Shape{2, 1, 32, 32});
    Dnet dn(cfg, 0);
    const DnetOutput d = dn.forward(random_image(2, 32, 2), {10, 900}, o.features);
    CHECK(d.eps_hat.shape() == Shape{2, 1, 32, 32});
    CHECK(d.x0_logits.shape() == Shape{2, 1, 32, 32});
  }

  TEST_CASE("shape errors name the offending feature") {
    const NetworkConfig cfg = tiny::network();
    Cfenet cf(cfg, 0);
    Dnet dn(cfg, 0);
    CHECK_THROWS_AS(cf.forward(random_image(1, 16, 1)), Error);
    ConditionalFeatures bad = cf.forward(random_image(1, 32, 1)).features;
    bad.cf[2] = bad.cf[1];
    try {
      dn.forward(random_image(1, 32, 2), {5}, bad);
      FAIL("expected a shape error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kShapeMismatch);
      CHECK(std::string(e.what()).find("conditional feature 3") != std::string::npos);
    }
    CHECK_THROWS_AS(dn.forward(random_image(1, 32, 2), {5, 6}, cf.forward(random_image(1, 32, 1)).features), Error);
  }

  TEST_CASE("config validation") {
    NetworkConfig c = tiny::network();
    c.input_side = 40;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny::network();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c.use_dca = false;
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("dual cross-attention is identity at initialization and shape-checked") {
    Rng init(1);
    nn::ParamList params;
    nn::ParamBuilder pb(params, init);
    const DualCrossAttention dca = DualCrossAttention::make(pb, 4, 2);
    const Var cf = random_tensor({1, 4, 4, 4}, 3), df = random_tensor({1, 4, 4, 4}, 4);
    const Var out = dca_fuse(cf, df, dca);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(df.data()[i]));
    CHECK_THROWS_AS(dca_fuse(cf, random_tensor({1, 4, 2, 2}, 1), dca), Error);
  }

  TEST_CASE("disabling attention removes its parameters") {
    NetworkConfig with = tiny::network(), without = tiny::network();
    without.use_dca = false;
    CHECK(parameter_count(Dnet(with, 0).params()) > parameter_count(Dnet(without, 0).params()));
  }

  TEST_CASE("frozen extractor receives no gradient") {
    const NetworkConfig cfg = tiny::network();
    Cfenet cf(cfg, 0);
    cf.set_frozen(true);
    Dnet dn(cfg, 0);
    const std::string before = parameter_checksum(cf.params());
    const CfenetOutput o = cf.forward(random_image(1, 32, 1));
    const DnetOutput d = dn.forward(random_image(1, 32, 2), {400}, o.features);
    backward(ops::add(ops::mse_loss(d.eps_hat, std::vector<real>(1024, 1)), ops::mse_loss(d.x0_logits, std::vector<real>(1024, 1))));
    for (const auto& [name, p] : cf.params()) CHECK_FALSE(p.has_grad());
    CHECK(parameter_checksum(cf.params()) == before);
  }

  TEST_CASE("checkpoint round trip and corruption") {
    const fs::path path = fs::temp_directory_path() / "stagediff_test_model.ckpt";
    ModelBundle m;
    m.network = tiny::network();
    m.schedule = build_schedule(1000);
    m.cfenet = std::make_unique<Cfenet>(m.network, 3);
    m.cfenet->set_frozen(true);
    m.dnet = std::make_unique<Dnet>(m.network, 4);
    m.meta["note"] = "x";
    save_model(path.string(), m);
    const ModelBundle r = load_model(path.string());
    CHECK(parameter_checksum(r.cfenet->params()) == parameter_checksum(m.cfenet->params()));
    REQUIRE(r.dnet);
    CHECK(parameter_checksum(r.dnet->params()) == parameter_checksum(m.dnet->params()));
    CHECK(r.cfenet->frozen());
    CHECK(r.meta["note"] == "x");
    CHECK(r.schedule.alphas_cumprod == m.schedule.alphas_cumprod);

    // Pretraining-only bundle.
    m.dnet.reset();
    save_model(path.string(), m);
    CHECK_FALSE(load_model(path.string()).dnet);

    // Truncated payload and bad magic.
    const auto size = fs::file_size(path);
    fs::resize_file(path, size - 8);
    CHECK_THROWS_AS(load_model(path.string()), Error);
    std::ofstream(path, std::ios::binary) << "NOTACKPT";
    CHECK_THROWS_AS(load_model(path.string()), Error);
    CHECK_THROWS_AS(load_model((fs::temp_directory_path() / "missing.ckpt").string()), Error);
    fs::remove(path);
  }

  TEST_CASE("loading into a different architecture fails") {
    const fs::path path = fs::temp_directory_path() / "stagediff_test_params.ckpt";
    Cfenet a(tiny::network(), 0);
    write_checkpoint(path.string(), {{"kind", "test"}}, {&a.params()});
    const Checkpoint ck = read_checkpoint(path.string());
    NetworkConfig wider = tiny::network();
    wider.widths = {8, 8, 8, 8, 8};
    Cfenet b(wider, 0);
    CHECK_THROWS_AS(load_parameters(ck, b.params()), Error);
    Cfenet c(tiny::network(), 9);
    load_parameters(ck, c.params());
    CHECK(parameter_checksum(c.params()) == parameter_checksum(a.params()));
    fs::remove(path);
  }
}
