// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/stagediff.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <set>
#include <string>

#include "json.hpp"
#include "stagediff/checkpoint.hpp"
#include "stagediff/data.hpp"
#include "stagediff/diagnostics.hpp"
#include "stagediff/error.hpp"
#include "stagediff/fusion.hpp"
#include "stagediff/hash.hpp"
#include "stagediff/losses.hpp"
#include "stagediff/sampler.hpp"
#include "stagediff/trainer.hpp"

#ifndef STAGEDIFF_VERSION_STRING
#define STAGEDIFF_VERSION_STRING "0.0.0"
#endif

using nlohmann::json;
using namespace stagediff;

struct stagediff_dataset {
  Dataset d;
};

struct stagediff_model {
  ModelBundle m;
};

struct stagediff_ensemble {
  EnsembleOutput e;
  SamplerConfig cfg;
};

namespace {

thread_local std::string g_error;

template <class F>
int guard(F&& f) {
  try {
    f();
    g_error.clear();
    return STAGEDIFF_OK;
  } catch (const Error& e) {
    g_error = e.what();
    return static_cast<int>(e.code());
  } catch (const json::exception& e) {
    g_error = std::string("malformed JSON: ") + e.what();
    return STAGEDIFF_ERR_FORMAT;
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return STAGEDIFF_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return STAGEDIFF_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  check(p != nullptr, ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// Parses an optional JSON object and rejects keys outside `allowed`.
json parse_config(const char* text, const char* what, std::initializer_list<const char*> allowed) {
  if (!text || !*text) return json::object();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string(what) + " is not valid JSON: " + e.what());
  }
  check(j.is_object(), ErrorCode::kFormat, std::string(what) + " must be a JSON object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    check(keys.count(k) > 0, ErrorCode::kInvalidArgument, "unknown key '" + k + "' in " + what);
  return j;
}

SynthConfig synth_config(const char* text) {
  const json j = parse_config(text, "synthetic config",
                              {"num_domains", "samples_per_domain", "side", "empty_mask_fraction", "empty_domain",
                               "empty_domain_fraction", "num_folds", "seed"});
  SynthConfig c;
  c.num_domains = j.value("num_domains", c.num_domains);
  c.samples_per_domain = j.value("samples_per_domain", c.samples_per_domain);
  c.side = j.value("side", c.side);
  c.empty_mask_fraction = j.value("empty_mask_fraction", c.empty_mask_fraction);
  c.empty_domain = j.value("empty_domain", c.empty_domain);
  c.empty_domain_fraction = j.value("empty_domain_fraction", c.empty_domain_fraction);
  c.num_folds = j.value("num_folds", c.num_folds);
  c.seed = j.value("seed", c.seed);
  return c;
}

SamplerConfig sampler_config(const json& j, const StagePolicy* policy) {
  for (const auto& [k, v] : j.items()) {
    static const std::set<std::string> keys{"t_start",           "t_mid_high", "t_mid_low", "ddim_interval",
                                            "fanout_per_branch", "eta_refine", "seed"};
    check(keys.count(k) > 0, ErrorCode::kInvalidArgument, "unknown key '" + k + "' in sampler config");
  }
  SamplerConfig c;
  if (policy) {
    c.t_mid_high = policy->high_threshold;
    c.t_mid_low = policy->low_threshold;
    c.t_start = policy->num_timesteps - 1;
  }
  c.t_start = j.value("t_start", c.t_start);
  c.t_mid_high = j.value("t_mid_high", c.t_mid_high);
  c.t_mid_low = j.value("t_mid_low", c.t_mid_low);
  c.ddim_interval = j.value("ddim_interval", c.ddim_interval);
  c.fanout_per_branch = j.value("fanout_per_branch", c.fanout_per_branch);
  c.eta_refine = j.value("eta_refine", c.eta_refine);
  c.seed = j.value("seed", c.seed);
  return c;
}

StapleConfig staple_config(const char* text) {
  const json j = parse_config(text, "staple config", {"alpha0", "beta0", "prior", "iterations"});
  StapleConfig c;
  c.alpha0 = j.value("alpha0", c.alpha0);
  c.beta0 = j.value("beta0", c.beta0);
  c.prior = j.value("prior", c.prior);
  c.iterations = j.value("iterations", c.iterations);
  check(c.alpha0 > 0 && c.alpha0 < 1 && c.beta0 > 0 && c.beta0 < 1, ErrorCode::kInvalidArgument,
        "staple alpha0 and beta0 must lie in (0, 1)");
  return c;
}

TrainConfig train_config(const char* text, bool pretrain = false) {
  const json j = parse_config(text, "train config",
                              {"preset", "epochs", "batch_size", "lr", "min_lr", "lr_schedule", "optimizer", "clip_norm", "seed",
                               "policy", "beta", "num_timesteps", "method", "fold", "augment", "val_every",
                               "val_samples", "val_fanout", "cache_features"});
  const std::string preset = j.value("preset", "desk");
  check(preset == "desk" || preset == "full", ErrorCode::kInvalidArgument, "preset must be 'desk' or 'full'");
  TrainConfig c = preset == "full" ? full_train_config() : pretrain ? desk_pretrain_config() : desk_train_config();
  from_json(j, c);
  c.validate();
  return c;
}

NetworkConfig network_config(const char* text) {
  const json j = parse_config(text, "network config",
                              {"preset", "input_side", "in_channels", "widths", "dca_levels", "use_dca", "heads",
                               "time_dim"});
  const std::string preset = j.value("preset", "desk");
  check(preset == "desk" || preset == "full", ErrorCode::kInvalidArgument, "preset must be 'desk' or 'full'");
  NetworkConfig c = preset == "desk" ? desk_network_config() : NetworkConfig{};
  if (preset == "full") c.input_side = 256;
  json merged = c;
  for (const auto& [k, v] : j.items())
    if (k != "preset") merged[k] = v;
  c = merged.get<NetworkConfig>();
  c.validate();
  return c;
}

EvalConfig eval_config(const json& j, const StagePolicy& policy, DenoiseMethod& method, int& fold) {
  EvalConfig c;
  c.sampler = sampler_config(j.value("sampler", json::object()), &policy);
  c.uniform_steps = j.value("uniform_steps", c.uniform_steps);
  c.fuse = j.value("fuse", c.fuse);
  const std::string ep = j.value("empty_policy", "score-one");
  check(ep == "score-one" || ep == "exclude", ErrorCode::kInvalidArgument,
        "empty_policy must be 'score-one' or 'exclude'");
  c.empty_policy = ep == "exclude" ? EmptyPolicy::kExclude : EmptyPolicy::kScoreOne;
  c.max_samples = j.value("max_samples", c.max_samples);
  if (j.contains("method")) method = method_from_name(j["method"].get<std::string>());
  fold = j.value("fold", fold);
  return c;
}

json summary_json(const MetricSummary& m) {
  return {{"mdice", m.mdice}, {"miou", m.miou}, {"counted", m.counted}, {"excluded", m.excluded}};
}

std::unique_ptr<std::ofstream> open_log(const char* path) {
  if (!path || !*path) return nullptr;
  auto f = std::make_unique<std::ofstream>(path, std::ios::app);
  check(f->good(), ErrorCode::kIo, std::string("cannot open log file ") + path);
  return f;
}

const Dnet& require_dnet(const stagediff_model* model) {
  check(model->m.dnet != nullptr, ErrorCode::kState, "model has no trained denoiser (run train first)");
  return *model->m.dnet;
}

DenoiseMethod trained_method(const ModelBundle& m) {
  if (m.meta.contains("train") && m.meta["train"].contains("method"))
    return method_from_name(m.meta["train"]["method"].get<std::string>());
  return DenoiseMethod::kStaged;
}

std::vector<float> copy_image(const stagediff_model* model, const float* image, size_t n) {
  require(image, "image");
  const int s = model->m.network.input_side;
  check(n == static_cast<size_t>(s) * s, ErrorCode::kShapeMismatch,
        "image has " + std::to_string(n) + " pixels, model expects " + std::to_string(s) + "x" + std::to_string(s));
  return std::vector<float>(image, image + n);
}

}  // namespace

extern "C" {

const char* stagediff_version(void) { return STAGEDIFF_VERSION_STRING; }

const char* stagediff_last_error(void) { return g_error.c_str(); }

const char* stagediff_status_name(int status) {
  switch (status) {
    case STAGEDIFF_OK: return "ok";
    case STAGEDIFF_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case STAGEDIFF_ERR_SHAPE: return "shape_mismatch";
    case STAGEDIFF_ERR_OUT_OF_RANGE: return "out_of_range";
    case STAGEDIFF_ERR_IO: return "io";
    case STAGEDIFF_ERR_FORMAT: return "format";
    case STAGEDIFF_ERR_NUMERIC: return "numeric";
    case STAGEDIFF_ERR_STATE: return "state";
    default: return "internal";
  }
}

void stagediff_string_free(char* s) { std::free(s); }
void stagediff_buffer_free(void* p) { std::free(p); }

int stagediff_dataset_generate(const char* synth_json, stagediff_dataset** out) {
  return guard([&] {
    require(out, "out");
    auto ds = std::make_unique<stagediff_dataset>();
    ds->d = generate_synthetic(synth_config(synth_json));
    *out = ds.release();
  });
}

int stagediff_dataset_ingest(const char* root, const char* ingest_json, stagediff_dataset** out) {
  return guard([&] {
    require(root, "root");
    require(out, "out");
    const json j = parse_config(ingest_json, "ingest config", {"side", "num_folds", "seed"});
    IngestConfig c;
    c.side = j.value("side", c.side);
    c.num_folds = j.value("num_folds", c.num_folds);
    c.seed = j.value("seed", c.seed);
    auto ds = std::make_unique<stagediff_dataset>();
    ds->d = ingest_directory(root, c);
    *out = ds.release();
  });
}

int stagediff_dataset_load(const char* dir, stagediff_dataset** out) {
  return guard([&] {
    require(dir, "dir");
    require(out, "out");
    auto ds = std::make_unique<stagediff_dataset>();
    ds->d = load_dataset(dir);
    *out = ds.release();
  });
}

int stagediff_dataset_save(const stagediff_dataset* ds, const char* dir) {
  return guard([&] {
    require(ds, "dataset");
    require(dir, "dir");
    save_dataset(ds->d, dir);
  });
}

int stagediff_dataset_size(const stagediff_dataset* ds, size_t* count, int* side) {
  return guard([&] {
    require(ds, "dataset");
    if (count) *count = ds->d.records.size();
    if (side) *side = ds->d.side;
  });
}

int stagediff_dataset_manifest(const stagediff_dataset* ds, char** out) {
  return guard([&] {
    require(ds, "dataset");
    require(out, "json");
    *out = dup_string(dataset_manifest(ds->d).dump());
  });
}

int stagediff_dataset_record(const stagediff_dataset* ds, size_t index, float* image, uint8_t* mask) {
  return guard([&] {
    require(ds, "dataset");
    check(index < ds->d.records.size(), ErrorCode::kOutOfRange, "record index out of range");
    const auto& r = ds->d.records[index];
    if (image) std::copy(r.image.begin(), r.image.end(), image);
    if (mask) std::copy(r.mask.begin(), r.mask.end(), mask);
  });
}

void stagediff_dataset_free(stagediff_dataset* ds) { delete ds; }

int stagediff_pretrain(const stagediff_dataset* ds, const char* network_json, const char* train_json,
                       const char* log_path, stagediff_model** out) {
  return guard([&] {
    require(ds, "dataset");
    require(out, "out");
    const NetworkConfig net = network_config(network_json);
    const TrainConfig cfg = train_config(train_json, /*pretrain=*/true);
    auto f = open_log(log_path);
    TrainLog log;
    log.stream = f.get();
    PretrainResult r = pretrain_cfenet(ds->d, net, cfg, log);
    auto model = std::make_unique<stagediff_model>();
    model->m.network = net;
    model->m.schedule = build_schedule(cfg.num_timesteps, cfg.beta);
    model->m.policy = cfg.policy;
    model->m.cfenet = std::move(r.cfenet);
    model->m.meta["pretrain"] = cfg;
    model->m.meta["pretrain_val_mdice"] = r.final_val_mdice;
    model->m.meta["pretrain_seconds"] = r.wall_seconds;
    model->m.meta["data_manifest"] = manifest_checksum(ds->d);
    *out = model.release();
  });
}

int stagediff_train(const stagediff_dataset* ds, stagediff_model* model, const char* train_json, const char* log_path) {
  return guard([&] {
    require(ds, "dataset");
    require(model, "model");
    const TrainConfig cfg = train_config(train_json);
    auto f = open_log(log_path);
    TrainLog log;
    log.stream = f.get();
    DnetResult r = train_dnet(ds->d, *model->m.cfenet, cfg, log);
    model->m.dnet = std::move(r.dnet);
    model->m.schedule = build_schedule(cfg.num_timesteps, cfg.beta);
    model->m.policy = cfg.policy;
    model->m.meta["train"] = cfg;
    model->m.meta["train_seconds"] = r.wall_seconds;
    model->m.meta["train_steps"] = r.steps;
    model->m.meta["data_manifest"] = manifest_checksum(ds->d);
  });
}

int stagediff_model_save(const stagediff_model* model, const char* path) {
  return guard([&] {
    require(model, "model");
    require(path, "path");
    save_model(path, model->m);
  });
}

int stagediff_model_load(const char* path, stagediff_model** out) {
  return guard([&] {
    require(path, "path");
    require(out, "out");
    auto model = std::make_unique<stagediff_model>();
    model->m = load_model(path);
    *out = model.release();
  });
}

int stagediff_model_info(const stagediff_model* model, char** out) {
  return guard([&] {
    require(model, "model");
    require(out, "json");
    const auto& m = model->m;
    json j{{"network", m.network},
           {"schedule", schedule_descriptor(m.schedule)},
           {"policy", m.policy},
           {"meta", m.meta},
           {"cfenet_frozen", m.cfenet->frozen()},
           {"cfenet_parameters", parameter_count(m.cfenet->params())},
           {"cfenet_checksum", parameter_checksum(m.cfenet->params())},
           {"has_dnet", m.dnet != nullptr}};
    if (m.dnet) {
      j["dnet_parameters"] = parameter_count(m.dnet->params());
      j["dnet_checksum"] = parameter_checksum(m.dnet->params());
    }
    *out = dup_string(j.dump());
  });
}

void stagediff_model_free(stagediff_model* model) { delete model; }

int stagediff_infer(const stagediff_model* model, const float* image, size_t n, const char* sampler_json,
                    stagediff_ensemble** out) {
  return guard([&] {
    require(model, "model");
    require(out, "out");
    const Dnet& dnet = require_dnet(model);
    const std::vector<float> img = copy_image(model, image, n);
    json j = json::object();
    if (sampler_json && *sampler_json) j = json::parse(sampler_json);
    auto ens = std::make_unique<stagediff_ensemble>();
    ens->cfg = sampler_config(j, &model->m.policy);
    NetworkDenoiser den(*model->m.cfenet, dnet);
    ens->e = staged_sample(img, den, model->m.schedule, ens->cfg);
    check(den.feature_calls() == 1, ErrorCode::kState, "conditional features were computed more than once");
    *out = ens.release();
  });
}

int stagediff_ensemble_size(const stagediff_ensemble* ens, size_t* masks, size_t* pixels) {
  return guard([&] {
    require(ens, "ensemble");
    if (masks) *masks = ens->e.masks.size();
    if (pixels) *pixels = ens->e.masks.empty() ? 0 : ens->e.masks[0].size();
  });
}

int stagediff_ensemble_mask(const stagediff_ensemble* ens, size_t index, uint8_t* out, size_t n) {
  return guard([&] {
    require(ens, "ensemble");
    require(out, "out");
    check(index < ens->e.masks.size(), ErrorCode::kOutOfRange, "ensemble mask index out of range");
    check(n == ens->e.masks[index].size(), ErrorCode::kShapeMismatch, "output buffer size mismatch");
    std::copy(ens->e.masks[index].begin(), ens->e.masks[index].end(), out);
  });
}

int stagediff_ensemble_info(const stagediff_ensemble* ens, char** out) {
  return guard([&] {
    require(ens, "ensemble");
    require(out, "json");
    json prov = json::array();
    for (const auto& p : ens->e.provenance)
      prov.push_back({{"trunk", trunk_name(p.trunk)}, {"refinement", p.refinement_index}, {"seed", p.seed}});
    const auto counts = count_network_evaluations(ens->cfg);
    json j{{"masks", ens->e.masks.size()},
           {"provenance", prov},
           {"trunk_timesteps", ens->e.trunk_timesteps},
           {"network_calls", ens->e.network_calls},
           {"trunk_evaluations", counts.trunk},
           {"total_evaluations", counts.total},
           {"sampler",
            {{"t_start", ens->cfg.t_start},
             {"t_mid_high", ens->cfg.t_mid_high},
             {"t_mid_low", ens->cfg.t_mid_low},
             {"ddim_interval", ens->cfg.ddim_interval},
             {"fanout_per_branch", ens->cfg.fanout_per_branch},
             {"eta_refine", ens->cfg.eta_refine},
             {"seed", ens->cfg.seed}}}};
    *out = dup_string(j.dump());
  });
}

void stagediff_ensemble_free(stagediff_ensemble* ens) { delete ens; }

int stagediff_infer_baseline(const stagediff_model* model, const float* image, size_t n, const char* method,
                             int steps, uint64_t seed, uint8_t* out) {
  return guard([&] {
    require(model, "model");
    require(method, "method");
    require(out, "out");
    const Dnet& dnet = require_dnet(model);
    const std::vector<float> img = copy_image(model, image, n);
    const DenoiseMethod m = method_from_name(method);
    check(m != DenoiseMethod::kStaged, ErrorCode::kInvalidArgument, "use stagediff_infer for the staged sampler");
    const Branch br = m == DenoiseMethod::kUniformNoise || m == DenoiseMethod::kOneStepNoise ? Branch::kNoise
                                                                                             : Branch::kMask;
    NetworkDenoiser den(*model->m.cfenet, dnet);
    const auto mask = m == DenoiseMethod::kOneStepMask || m == DenoiseMethod::kOneStepNoise
                          ? one_step_sample(img, den, model->m.schedule, br, seed)
                          : uniform_ddim_sample(img, den, model->m.schedule, br, steps, seed);
    std::copy(mask.begin(), mask.end(), out);
  });
}

int stagediff_count_evaluations(const char* sampler_json, int* trunk, int* total) {
  return guard([&] {
    json j = json::object();
    if (sampler_json && *sampler_json) j = json::parse(sampler_json);
    const SamplerConfig c = sampler_config(j, nullptr);
    c.validate(build_schedule(1000));
    const auto r = count_network_evaluations(c);
    if (trunk) *trunk = r.trunk;
    if (total) *total = r.total;
  });
}

int stagediff_staple(const uint8_t* masks, size_t count, size_t pixels, const char* staple_json, uint8_t* consensus,
                     char** state_json) {
  return guard([&] {
    require(masks, "masks");
    require(consensus, "consensus");
    check(count >= 1 && pixels >= 1, ErrorCode::kInvalidArgument, "staple needs at least one non-empty mask");
    std::vector<BinaryMask> ms(count);
    for (size_t j = 0; j < count; ++j) {
      ms[j].resize(pixels);
      for (size_t i = 0; i < pixels; ++i) ms[j][i] = masks[j * pixels + i] ? 1 : 0;
    }
    const StapleResult r = staple_fuse(ms, staple_config(staple_json));
    std::copy(r.consensus.begin(), r.consensus.end(), consensus);
    if (state_json)
      *state_json = dup_string(json{{"alphas", r.state.alphas},
                                    {"betas", r.state.betas},
                                    {"prior", r.state.prior},
                                    {"iterations", r.state.iterations},
                                    {"log_likelihood", r.state.log_likelihood}}
                                   .dump());
  });
}

int stagediff_dice_iou(const uint8_t* pred, const uint8_t* gt, size_t n, double* dice, double* iou) {
  return guard([&] {
    require(pred, "pred");
    require(gt, "gt");
    const DiceIou r = dice_iou({pred, n}, {gt, n});
    if (dice) *dice = r.dice;
    if (iou) *iou = r.iou;
  });
}

int stagediff_evaluate(const stagediff_model* model, const stagediff_dataset* ds, const char* eval_json,
                       char** report_json) {
  return guard([&] {
    require(model, "model");
    require(ds, "dataset");
    require(report_json, "report_json");
    const Dnet& dnet = require_dnet(model);
    const json j = parse_config(eval_json, "eval config",
                                {"fold", "method", "sampler", "uniform_steps", "fuse", "empty_policy", "max_samples"});
    DenoiseMethod method = trained_method(model->m);
    int fold = 0;
    const EvalConfig ec = eval_config(j, model->m.policy, method, fold);
    const EvalReport r =
        evaluate(ds->d, ds->d.fold_indices(fold, true), *model->m.cfenet, dnet, model->m.schedule, method, ec);
    json scores = json::array();
    for (const auto& s : r.scores)
      scores.push_back({{"sample_id", s.id},
                        {"domain", s.domain},
                        {"dice", s.fused.dice},
                        {"iou", s.fused.iou},
                        {"single_dice", s.single.dice},
                        {"single_iou", s.single.iou},
                        {"both_empty", s.fused.both_empty}});
    *report_json = dup_string(json{{"method", method_name(method)},
                                   {"fold", fold},
                                   {"trunk_steps", r.trunk_steps},
                                   {"total_calls", r.total_calls},
                                   {"fused", summary_json(r.fused)},
                                   {"single", summary_json(r.single)},
                                   {"scores", scores}}
                                  .dump());
  });
}

int stagediff_ablate(const stagediff_dataset* ds, const stagediff_model* model, const char* matrix_json,
                     const char* eval_json, const char* log_path, char** table_json) {
  return guard([&] {
    require(ds, "dataset");
    require(model, "model");
    require(matrix_json, "matrix_json");
    require(table_json, "table_json");
    const json mj = json::parse(matrix_json);
    check(mj.is_array() && !mj.empty(), ErrorCode::kInvalidArgument, "ablation matrix must be a non-empty array");
    std::vector<AblationEntry> matrix;
    for (const auto& row : mj) {
      check(row.contains("name"), ErrorCode::kInvalidArgument, "every ablation row needs a name");
      const std::string text = row.value("train", json::object()).dump();
      matrix.push_back({row["name"].get<std::string>(), train_config(text.c_str())});
    }
    const json ej = parse_config(eval_json, "eval config",
                                 {"fold", "method", "sampler", "uniform_steps", "fuse", "empty_policy", "max_samples"});
    DenoiseMethod unused = DenoiseMethod::kStaged;
    int fold = 0;
    const EvalConfig ec = eval_config(ej, model->m.policy, unused, fold);
    auto f = open_log(log_path);
    TrainLog log;
    log.stream = f.get();
    const auto rows = run_ablation(matrix, ds->d, *model->m.cfenet, ec, log);
    *table_json = dup_string(ablation_table(rows).dump());
  });
}

int stagediff_profile(const stagediff_dataset* ds, const stagediff_model* model, const char* profile_json,
                      const char* csv_path, char** profile_json_out) {
  return guard([&] {
    require(ds, "dataset");
    require(model, "model");
    const json j = parse_config(profile_json, "profile config",
                                {"target", "steps", "bins", "warmup_steps", "warmup_batch", "lr", "seed", "fold"});
    ProfileConfig c;
    if (j.contains("target")) c.target = target_from_name(j["target"].get<std::string>());
    c.steps = j.value("steps", c.steps);
    c.bins = j.value("bins", c.bins);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.warmup_batch = j.value("warmup_batch", c.warmup_batch);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    c.fold = j.value("fold", c.fold);
    c.num_timesteps = model->m.schedule.num_timesteps;
    c.beta = model->m.schedule.spec;
    const AttentionProfile p = profile_gradients(ds->d, *model->m.cfenet, c);
    if (csv_path && *csv_path) export_profile(p, csv_path);
    if (profile_json_out)
      *profile_json_out = dup_string(json{{"target", target_name(p.target)},
                                          {"bin_lo", p.bin_lo},
                                          {"bin_hi", p.bin_hi},
                                          {"grad_mean", p.grad_mean},
                                          {"counts", p.counts},
                                          {"empty", p.empty},
                                          {"warmup_steps", p.warmup_steps},
                                          {"seed", p.seed}}
                                         .dump());
  });
}

int stagediff_image_load(const char* path, int side, float** image) {
  return guard([&] {
    require(path, "path");
    require(image, "image");
    check(side > 0, ErrorCode::kInvalidArgument, "side must be positive");
    const Gray8 g = read_pgm(path);
    const auto [lo, hi] = std::minmax_element(g.pixels.begin(), g.pixels.end());
    const double range = std::max(1.0, static_cast<double>(*hi) - *lo);
    std::vector<float> im(g.pixels.size());
    for (size_t i = 0; i < im.size(); ++i) im[i] = static_cast<float>(2.0 * (g.pixels[i] - *lo) / range - 1.0);
    const auto r = resize_bilinear(im, g.width, g.height, side, side);
    float* buf = static_cast<float*>(std::malloc(r.size() * sizeof(float)));
    if (!buf) throw std::bad_alloc();
    std::copy(r.begin(), r.end(), buf);
    *image = buf;
  });
}

int stagediff_mask_load(const char* path, int side, uint8_t** mask) {
  return guard([&] {
    require(path, "path");
    require(mask, "mask");
    check(side > 0, ErrorCode::kInvalidArgument, "side must be positive");
    const Gray8 g = read_pgm(path);
    std::vector<uint8_t> m(g.pixels.size());
    for (size_t i = 0; i < m.size(); ++i) {
      check(g.pixels[i] == 0 || g.pixels[i] == g.maxval, ErrorCode::kFormat,
            "non-binary mask value " + std::to_string(g.pixels[i]) + " in " + path);
      m[i] = g.pixels[i] ? 1 : 0;
    }
    const auto r = resize_nearest(m, g.width, g.height, side, side);
    uint8_t* buf = static_cast<uint8_t*>(std::malloc(r.size()));
    if (!buf) throw std::bad_alloc();
    std::copy(r.begin(), r.end(), buf);
    *mask = buf;
  });
}

int stagediff_mask_save(const char* path, const uint8_t* mask, int width, int height) {
  return guard([&] {
    require(path, "path");
    require(mask, "mask");
    check(width > 0 && height > 0, ErrorCode::kInvalidArgument, "mask dimensions must be positive");
    std::vector<uint8_t> px(static_cast<size_t>(width) * height);
    for (size_t i = 0; i < px.size(); ++i) px[i] = mask[i] ? 255 : 0;
    write_pgm(path, width, height, px);
  });
}

int stagediff_sha256_file(const char* path, char** hex) {
  return guard([&] {
    require(path, "path");
    require(hex, "hex");
    *hex = dup_string(sha256_file(path));
  });
}

int stagediff_sha256_bytes(const void* data, size_t n, char** hex) {
  return guard([&] {
    require(hex, "hex");
    check(data != nullptr || n == 0, ErrorCode::kInvalidArgument, "data must not be NULL");
    *hex = dup_string(Sha256().update(data, n).hex());
  });
}

}  // extern "C"
