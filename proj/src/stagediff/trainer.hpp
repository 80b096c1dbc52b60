// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stagediff/checkpoint.hpp"
#include "stagediff/data.hpp"
#include "stagediff/losses.hpp"
#include "stagediff/optim.hpp"
#include "stagediff/random.hpp"
#include "stagediff/sampler.hpp"

namespace stagediff {

// How DNet timesteps and targets are chosen during training.
enum class DenoiseMethod { kStaged, kUniformNoise, kUniformMask, kOneStepNoise, kOneStepMask };
const char* method_name(DenoiseMethod m);
DenoiseMethod method_from_name(const std::string& name);

struct TrainConfig {
  int epochs = 300;
  int batch_size = 64;
  double lr = 1e-4;
  double min_lr = 0.0;
  AdamWConfig optimizer;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  StagePolicy policy;
  BetaSpec beta;
  int num_timesteps = 1000;
  DenoiseMethod method = DenoiseMethod::kStaged;
  int fold = 0;
  bool augment = false;      // random flips; disables the CFENet feature cache
  int val_every = 1;         // epochs between validations, 0 = never
  int val_samples = 8;       // evaluation records used per validation
  int val_fanout = 2;        // refinement draws per trunk during validation
  bool cache_features = true;

  void validate() const;
};

// Full-scale budget: 300 epochs, batch 64, lr 1e-4, T = 1000.
TrainConfig full_train_config();
// Reduced budget for the synthetic task on a CPU.
TrainConfig desk_train_config();
// Desk budget for feature-network pretraining (fewer epochs).
TrainConfig desk_pretrain_config();
NetworkConfig desk_network_config();

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TimestepDraw {
  int t_raw = 0;
  int t = 0;                 // timestep actually fed to the network
  Stage stage = Stage::kProbabilisticModeling;  // stage of t_raw
  LossWeights weights;
};
// Uniform draw over [0, T-1], then the method's remapping and weights.
TimestepDraw draw_training_timestep(Rng& rng, const TrainConfig& cfg);

// Line-delimited JSON records; `stream` may be null.
struct TrainLog {
  std::vector<nlohmann::json> records;
  std::ostream* stream = nullptr;
  void write(nlohmann::json rec);
};

struct PretrainResult {
  std::unique_ptr<Cfenet> cfenet;  // frozen on return
  double final_val_mdice = 0;
  double wall_seconds = 0;
};

PretrainResult pretrain_cfenet(const Dataset& data, const NetworkConfig& net, const TrainConfig& cfg, TrainLog& log);

struct DnetResult {
  std::unique_ptr<Dnet> dnet;
  double wall_seconds = 0;
  long long steps = 0;
};

DnetResult train_dnet(const Dataset& data, const Cfenet& cfenet, const TrainConfig& cfg, TrainLog& log);

// Per-record evaluation ------------------------------------------------------

struct SampleScore {
  std::string id;
  std::string domain;
  DiceIou fused;   // consensus for staged, the only output otherwise
  DiceIou single;  // staged: mean over ensemble members; otherwise == fused
};

struct EvalConfig {
  SamplerConfig sampler;
  int uniform_steps = 100;
  bool fuse = true;
  EmptyPolicy empty_policy = EmptyPolicy::kScoreOne;
  int max_samples = 0;  // 0 = all evaluation records
};

struct EvalReport {
  std::vector<SampleScore> scores;
  MetricSummary fused;
  MetricSummary single;
  int trunk_steps = 0;
  int total_calls = 0;
};

// Inference procedure follows `method`: staged sampler, `uniform_steps` DDIM
// steps, or a single jump.
EvalReport evaluate(const Dataset& data, const std::vector<std::size_t>& indices, const Cfenet& cfenet,
                    const Dnet& dnet, const NoiseSchedule& sched, DenoiseMethod method, const EvalConfig& cfg);

// Ablation matrix ------------------------------------------------------------

struct AblationEntry {
  std::string name;
  TrainConfig train;
};

struct AblationRow {
  std::string name;
  std::string method;
  int high_threshold = 0, low_threshold = 0;
  bool ok = false;
  std::string error;
  double mdice = 0, miou = 0;
  double single_mdice = 0;
  int infer_steps = 0;
  int total_calls = 0;
  double train_seconds = 0;
};

// The CFENet is shared across rows; a failing row is reported, not thrown.
std::vector<AblationRow> run_ablation(const std::vector<AblationEntry>& matrix, const Dataset& data, const Cfenet& cfenet,
                                      const EvalConfig& eval, TrainLog& log);

nlohmann::json ablation_table(const std::vector<AblationRow>& rows);

}  // namespace stagediff
