// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace stagediff {

struct SampleRecord {
  std::string id;
  std::string domain;
  int side = 0;
  std::vector<float> image;         // side*side, values in [-1, 1]
  std::vector<std::uint8_t> mask;   // side*side, values in {0, 1}
  int fold = -1;
};

struct Dataset {
  int side = 0;
  int num_folds = 4;
  std::string source;  // "synthetic" or "ingest"
  std::uint64_t seed = 0;
  std::vector<SampleRecord> records;

  std::vector<std::size_t> fold_indices(int fold, bool eval) const;
};

struct SynthConfig {
  int num_domains = 6;
  int samples_per_domain = 100;
  int side = 64;
  double empty_mask_fraction = 0.0;     // all domains except the designated one
  int empty_domain = 5;                 // -1 disables the designated domain
  double empty_domain_fraction = 1.0 / 3.0;
  int num_folds = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

// Names of the synthetic domains, in generation order.
const std::vector<std::string>& synthetic_domain_names();

Dataset generate_synthetic(const SynthConfig& cfg);

struct IngestConfig {
  int side = 64;
  int num_folds = 4;
  std::uint64_t seed = 0;
};

// Reads `<id>.img.pgm` / `<id>.mask.pgm` pairs from `root`. Images are
// min-max normalized to [-1, 1] and resized bilinearly; masks must only hold
// 0 and their maxval and are resized with nearest neighbour.
Dataset ingest_directory(const std::string& root, const IngestConfig& cfg);

// Seeded shuffle, then round-robin fold assignment.
std::vector<int> assign_folds(std::size_t n, int num_folds, std::uint64_t seed);

std::string record_checksum(const SampleRecord& r);
nlohmann::json dataset_manifest(const Dataset& d);
std::string manifest_checksum(const Dataset& d);

// Writes PGM pairs plus manifest.json; load_dataset reads them back exactly.
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

struct Gray8 {
  int width = 0, height = 0, maxval = 255;
  std::vector<std::uint16_t> pixels;
};
Gray8 read_pgm(const std::string& path);
void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);

std::vector<float> resize_bilinear(const std::vector<float>& src, int sw, int sh, int dw, int dh);
std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& src, int sw, int sh, int dw, int dh);

// Image to 8-bit grey and back; values are quantized onto the 256-level grid.
std::uint8_t quantize_unit(float v);
float dequantize_unit(std::uint8_t q);

// Applies the same flips to image and mask in place.
void flip_sample(std::vector<float>& image, std::vector<std::uint8_t>& mask, int side, bool horizontal, bool vertical);

}  // namespace stagediff
