// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (little-endian):
//   8 bytes  magic "STGDCKPT"
//   u32      format version (kCheckpointVersion)
//   u64      header length in bytes
//   header   UTF-8 JSON: {"kind", "network", "schedule", "policy", "meta",
//            "tensors": [{"name", "shape", "offset", "count"}]}
//   payload  float32 values, tensors back to back at the listed offsets
//            (offsets count floats from the start of the payload)

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagediff/networks.hpp"
#include "stagediff/schedule.hpp"
#include "stagediff/stage_policy.hpp"

namespace stagediff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorBlob {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, TensorBlob> tensors;
};

void write_checkpoint(const std::string& path, nlohmann::json header, const std::vector<const nn::ParamList*>& params);
Checkpoint read_checkpoint(const std::string& path);
// Copies every parameter of `params` from the checkpoint; missing names or
// shape differences are errors.
void load_parameters(const Checkpoint& ckpt, nn::ParamList& params);

// Networks plus the diffusion settings they were trained with. `dnet` is null
// for a CFENet-only (pre-training) checkpoint.
struct ModelBundle {
  NetworkConfig network;
  NoiseSchedule schedule;
  StagePolicy policy;
  std::unique_ptr<Cfenet> cfenet;
  std::unique_ptr<Dnet> dnet;
  nlohmann::json meta = nlohmann::json::object();
};

void save_model(const std::string& path, const ModelBundle& m);
ModelBundle load_model(const std::string& path);

}  // namespace stagediff
