// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "stagediff/data.hpp"
#include "stagediff/error.hpp"

using namespace stagediff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("stagediff_test_" + name);
  fs::remove_all(p);
  return p;
}

SynthConfig small_config(std::uint64_t seed = 1) {
  SynthConfig c;
  c.samples_per_domain = 12;
  c.side = 32;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("default synthetic corpus shape") {
    SynthConfig c;
    const Dataset d = generate_synthetic(c);
    CHECK(d.records.size() == 600);
    CHECK(d.side == 64);
    std::map<std::string, int> per_domain, empty;
    std::map<int, int> per_fold;
    for (const auto& r : d.records) {
      ++per_domain[r.domain];
      ++per_fold[r.fold];
      int fg = 0;
      for (auto m : r.mask) {
        CHECK((m == 0 || m == 1));
        fg += m;
      }
      if (fg == 0) ++empty[r.domain];
      for (float v : r.image) CHECK((v >= -1.0f && v <= 1.0f));
    }
    CHECK(per_domain.size() == 6);
    for (const auto& [name, n] : per_domain) CHECK(n == 100);
    for (const auto& [fold, n] : per_fold) CHECK(n == 150);
    // Only the designated domain has empty masks, about a third of them.
    const std::string designated = synthetic_domain_names()[5];
    CHECK(empty.size() == 1);
    CHECK(empty[designated] >= 33);
    CHECK(empty[designated] <= 34);
  }

  TEST_CASE("domains differ in intensity signature") {
    const Dataset d = generate_synthetic(small_config());
    std::map<std::string, double> contrast;
    std::map<std::string, int> n;
    for (const auto& r : d.records) {
      double fg = 0, bg = 0;
      int nf = 0, nb = 0;
      for (std::size_t i = 0; i < r.mask.size(); ++i) (r.mask[i] ? (fg += r.image[i], ++nf) : (bg += r.image[i], ++nb));
      if (nf == 0) continue;
      contrast[r.domain] += fg / nf - bg / nb;
      ++n[r.domain];
    }
    // Bright and dark lesion domains have opposite polarity.
    CHECK(contrast["bright_ellipse"] / n["bright_ellipse"] > 0.2);
    CHECK(contrast["dark_ellipse"] / n["dark_ellipse"] < -0.2);
  }

  TEST_CASE("same seed gives the same manifest") {
    CHECK(manifest_checksum(generate_synthetic(small_config(4))) == manifest_checksum(generate_synthetic(small_config(4))));
    CHECK(manifest_checksum(generate_synthetic(small_config(4))) != manifest_checksum(generate_synthetic(small_config(5))));
  }

  TEST_CASE("fold selection partitions the records") {
    const Dataset d = generate_synthetic(small_config());
    std::set<std::size_t> seen;
    for (int f = 0; f < 4; ++f) {
      const auto ev = d.fold_indices(f, true), tr = d.fold_indices(f, false);
      CHECK(ev.size() + tr.size() == d.records.size());
      for (auto i : ev) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == d.records.size());
    CHECK_THROWS_AS(d.fold_indices(4, true), Error);
  }

  TEST_CASE("save and load round-trip exactly") {
    const Dataset d = generate_synthetic(small_config());
    const fs::path dir = scratch("roundtrip");
    save_dataset(d, dir.string());
    const Dataset r = load_dataset(dir.string());
    REQUIRE(r.records.size() == d.records.size());
    for (std::size_t i = 0; i < d.records.size(); ++i) {
      CHECK(r.records[i].id == d.records[i].id);
      CHECK(r.records[i].image == d.records[i].image);
      CHECK(r.records[i].mask == d.records[i].mask);
      CHECK(r.records[i].fold == d.records[i].fold);
    }
    CHECK(manifest_checksum(r) == manifest_checksum(d));
    // A corrupted pixel is caught by the record checksum.
    const fs::path victim = dir / (d.records[0].id + ".mask.pgm");
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put(static_cast<char>(d.records[0].mask.back() ? 0 : 255));
    f.close();
    CHECK_THROWS_AS(load_dataset(dir.string()), Error);
    fs::remove_all(dir);
  }

  TEST_CASE("directory ingestion") {
    const fs::path dir = scratch("ingest");
    fs::create_directories(dir);
    CHECK_THROWS_AS(ingest_directory(dir.string(), {}), Error);
    std::vector<std::uint8_t> img(40 * 40), mask(40 * 40, 0);
    for (int i = 0; i < 40 * 40; ++i) img[i] = static_cast<std::uint8_t>(i % 200 + 20);
    for (int i = 0; i < 400; ++i) mask[i] = 255;
    for (int k = 0; k < 8; ++k) {
      write_pgm((dir / ("case" + std::to_string(k) + ".img.pgm")).string(), 40, 40, img);
      write_pgm((dir / ("case" + std::to_string(k) + ".mask.pgm")).string(), 40, 40, mask);
    }
    IngestConfig c;
    c.side = 32;
    const Dataset d = ingest_directory(dir.string(), c);
    CHECK(d.records.size() == 8);
    CHECK(d.side == 32);
    std::map<int, int> folds;
    for (const auto& r : d.records) {
      ++folds[r.fold];
      CHECK(r.image.size() == 32u * 32u);
      float lo = 2, hi = -2;
      for (float v : r.image) lo = std::min(lo, v), hi = std::max(hi, v);
      // Normalized before resizing, so the resampled extremes sit inside [-1, 1].
      CHECK(lo >= -1.0f);
      CHECK(hi <= 1.0f);
      CHECK(hi - lo > 1.8f);
    }
    CHECK(folds.size() == 4);
    // Unpaired image.
    write_pgm((dir / "orphan.img.pgm").string(), 40, 40, img);
    CHECK_THROWS_AS(ingest_directory(dir.string(), c), Error);
    fs::remove(dir / "orphan.img.pgm");
    // Non-binary mask.
    mask[5] = 7;
    write_pgm((dir / "case0.mask.pgm").string(), 40, 40, mask);
    CHECK_THROWS_AS(ingest_directory(dir.string(), c), Error);
    fs::remove_all(dir);
  }

  TEST_CASE("invalid synthetic configs") {
    SynthConfig c = small_config();
    c.num_domains = 7;
    CHECK_THROWS_AS(generate_synthetic(c), Error);
    c = small_config();
    c.empty_mask_fraction = 1.0;
    CHECK_THROWS_AS(generate_synthetic(c), Error);
  }

  TEST_CASE("PGM helpers") {
    const fs::path dir = scratch("pgm");
    fs::create_directories(dir);
    const std::vector<std::uint8_t> px{0, 10, 200, 255, 3, 4};
    write_pgm((dir / "a.pgm").string(), 3, 2, px);
    const Gray8 g = read_pgm((dir / "a.pgm").string());
    CHECK(g.width == 3);
    CHECK(g.height == 2);
    CHECK(std::vector<std::uint8_t>(g.pixels.begin(), g.pixels.end()) == px);
    std::ofstream((dir / "bad.pgm").string()) << "P2\n1 1\n255\n0\n";
    CHECK_THROWS_AS(read_pgm((dir / "bad.pgm").string()), Error);
    CHECK(resize_nearest({1, 0, 0, 1}, 2, 2, 4, 4).size() == 16);
    for (int q = 0; q < 256; ++q) CHECK(quantize_unit(dequantize_unit(static_cast<std::uint8_t>(q))) == q);
    fs::remove_all(dir);
  }
}
