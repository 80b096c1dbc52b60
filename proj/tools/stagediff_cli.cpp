// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Talks to the library only through stagediff.h.

#include <stagediff/stagediff.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for any failure that should end the command with `status`.
struct CommandError : std::runtime_error {
  CommandError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
  int status;
};

void call(int status, const std::string& context) {
  if (status != STAGEDIFF_OK)
    throw CommandError(status, context + ": " + stagediff_last_error() + " [" + stagediff_status_name(status) + "]");
}

void usage_error(const std::string& what) { throw CommandError(STAGEDIFF_ERR_INVALID_ARGUMENT, what); }

std::string take(char* s) {
  std::string out = s ? s : "";
  stagediff_string_free(s);
  return out;
}

struct DatasetDel {
  void operator()(stagediff_dataset* p) const { stagediff_dataset_free(p); }
};
struct ModelDel {
  void operator()(stagediff_model* p) const { stagediff_model_free(p); }
};
struct EnsembleDel {
  void operator()(stagediff_ensemble* p) const { stagediff_ensemble_free(p); }
};
using DatasetPtr = std::unique_ptr<stagediff_dataset, DatasetDel>;
using ModelPtr = std::unique_ptr<stagediff_model, ModelDel>;
using EnsemblePtr = std::unique_ptr<stagediff_ensemble, EnsembleDel>;

std::string sha256_of(const std::string& path) {
  char* hex = nullptr;
  call(stagediff_sha256_file(path.c_str(), &hex), "hashing " + path);
  return take(hex);
}

// One manifest per invocation, written on success and on failure alike.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, char** argv) : command_(std::move(command)) {
    for (int i = 0; i < argc; ++i) argv_.push_back(argv[i]);
    start_ = std::chrono::steady_clock::now();
  }

  json config = json::object();
  json seeds = json::object();
  std::string data_manifest_checksum;

  void artifact(const std::string& path) { artifacts_.push_back(path); }

  void write(const fs::path& path, int status, const std::string& error) const {
    json arts = json::array();
    for (const auto& a : artifacts_) {
      json entry{{"path", a}};
      char* hex = nullptr;
      if (stagediff_sha256_file(a.c_str(), &hex) == STAGEDIFF_OK)
        entry["sha256"] = take(hex);
      else
        entry["sha256"] = nullptr;
      arts.push_back(entry);
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json j{{"command", command_},
           {"argv", argv_},
           {"config", config},
           {"seeds", seeds},
           {"data_manifest_checksum", data_manifest_checksum.empty() ? json(nullptr) : json(data_manifest_checksum)},
           {"version", stagediff_version()},
           {"artifacts", arts},
           {"wall_seconds", wall},
           {"status", status == 0 ? "ok" : "failed"},
           {"exit_code", status}};
    if (status != 0) j["error"] = error;
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) std::cerr << "stagediff: could not write run manifest " << path << "\n";
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::vector<std::string> artifacts_;
  std::chrono::steady_clock::time_point start_;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CommandError(STAGEDIFF_ERR_IO, "cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CommandError(STAGEDIFF_ERR_FORMAT, path + " is not valid JSON: " + e.what());
  }
}

void write_json_file(const std::string& path, const json& j, RunManifest& m) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw CommandError(STAGEDIFF_ERR_IO, "cannot write " + path);
  m.artifact(path);
}

DatasetPtr load_dataset(const std::string& dir, RunManifest& m) {
  stagediff_dataset* raw = nullptr;
  call(stagediff_dataset_load(dir.c_str(), &raw), "loading dataset " + dir);
  DatasetPtr ds(raw);
  m.data_manifest_checksum = sha256_of((fs::path(dir) / "manifest.json").string());
  return ds;
}

ModelPtr load_model(const std::string& path) {
  if (!fs::exists(path)) throw CommandError(STAGEDIFF_ERR_IO, "checkpoint not found: " + path);
  stagediff_model* raw = nullptr;
  call(stagediff_model_load(path.c_str(), &raw), "loading checkpoint " + path);
  return ModelPtr(raw);
}

json model_info(const stagediff_model* model) {
  char* s = nullptr;
  call(stagediff_model_info(model, &s), "model info");
  return json::parse(take(s));
}

json dataset_manifest(const stagediff_dataset* ds) {
  char* s = nullptr;
  call(stagediff_dataset_manifest(ds, &s), "dataset manifest");
  return json::parse(take(s));
}

std::vector<uint8_t> load_mask(const std::string& path, int* side_out) {
  // Probe the native size first: masks are compared at their stored resolution.
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError(STAGEDIFF_ERR_IO, "cannot read " + path);
  std::string magic;
  int w = 0, h = 0;
  in >> magic;
  auto skip = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
  };
  skip();
  in >> w;
  skip();
  in >> h;
  if (magic != "P5" || w <= 0 || h <= 0) throw CommandError(STAGEDIFF_ERR_FORMAT, path + " is not a binary PGM");
  if (w != h) throw CommandError(STAGEDIFF_ERR_SHAPE, path + " is not square");
  uint8_t* buf = nullptr;
  call(stagediff_mask_load(path.c_str(), w, &buf), "loading mask " + path);
  std::vector<uint8_t> out(buf, buf + static_cast<size_t>(w) * h);
  stagediff_buffer_free(buf);
  *side_out = w;
  return out;
}

void save_mask(const std::string& path, const std::vector<uint8_t>& mask, int side, RunManifest& m) {
  call(stagediff_mask_save(path.c_str(), mask.data(), side, side), "writing " + path);
  m.artifact(path);
}

std::vector<std::string> list_masks(const std::vector<std::string>& inputs) {
  std::vector<std::string> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".pgm") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(in);
    }
  }
  return out;
}

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", std::gmtime(&now));
  return buf;
}

// Options shared by the training commands.
struct TrainOpts {
  std::string preset = "desk";
  std::optional<int> epochs, batch_size, fold;
  std::optional<double> lr, min_lr;
  std::optional<std::string> method;
  int high_threshold = 600, low_threshold = 300;
  bool augment = false;
  std::optional<int> val_every;
};

void add_train_opts(CLI::App* c, TrainOpts& o, bool thresholds) {
  c->add_option("--preset", o.preset, "Budget preset")->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  c->add_option("--epochs", o.epochs, "Training epochs");
  c->add_option("--batch-size", o.batch_size, "Mini-batch size");
  c->add_option("--lr", o.lr, "Peak learning rate");
  c->add_option("--min-lr", o.min_lr, "Final cosine learning rate");
  c->add_option("--fold", o.fold, "Held-out fold");
  c->add_option("--val-every", o.val_every, "Validate every N epochs (0 disables)");
  c->add_flag("--augment", o.augment, "Random flips (disables the feature cache)");
  if (thresholds) {
    c->add_option("--method", o.method, "Denoise method")
        ->check(CLI::IsMember({"staged", "uniform-noise", "uniform-mask", "one-step-noise", "one-step-mask"}));
    c->add_option("--high-threshold", o.high_threshold, "First timestep of the rapid stage")->capture_default_str();
    c->add_option("--low-threshold", o.low_threshold, "First timestep above the refinement stage")
        ->capture_default_str();
  }
}

json train_json(const TrainOpts& o, uint64_t seed, bool thresholds) {
  json j{{"preset", o.preset}, {"seed", seed}};
  if (o.epochs) j["epochs"] = *o.epochs;
  if (o.batch_size) j["batch_size"] = *o.batch_size;
  if (o.lr) j["lr"] = *o.lr;
  if (o.min_lr) j["min_lr"] = *o.min_lr;
  if (o.fold) j["fold"] = *o.fold;
  if (o.val_every) j["val_every"] = *o.val_every;
  if (o.augment) j["augment"] = true;
  if (thresholds) {
    if (o.method) j["method"] = *o.method;
    // Flags use the first timestep of each stage; the policy stores the last
    // timestep below it.
    if (o.high_threshold <= o.low_threshold)
      usage_error("--high-threshold (" + std::to_string(o.high_threshold) + ") must exceed --low-threshold (" +
                  std::to_string(o.low_threshold) + ")");
    j["policy"] = {{"high_threshold", o.high_threshold - 1}, {"low_threshold", o.low_threshold - 1}};
  }
  return j;
}

void print_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> w;
  for (const auto& r : rows)
    for (size_t i = 0; i < r.size(); ++i) {
      if (w.size() <= i) w.push_back(0);
      w[i] = std::max(w[i], r[i].size());
    }
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) std::printf("%-*s%s", static_cast<int>(w[i]), r[i].c_str(), i + 1 < r.size() ? "  " : "\n");
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct DomainAcc {
  double dice = 0, iou = 0;
  int n = 0, excluded = 0;
};

// Per-domain and overall table from (domain, dice, iou, both_empty) rows.
json metric_table(const std::vector<std::tuple<std::string, double, double, bool>>& rows, bool exclude_empty) {
  std::map<std::string, DomainAcc> acc;
  DomainAcc all;
  for (const auto& [domain, dice, iou, empty] : rows) {
    for (DomainAcc* a : {&acc[domain], &all}) {
      if (empty && exclude_empty) {
        ++a->excluded;
        continue;
      }
      a->dice += dice;
      a->iou += iou;
      ++a->n;
    }
  }
  std::vector<std::vector<std::string>> table{{"domain", "n", "excluded", "mDice", "mIoU"}};
  json out = json::object();
  auto emit = [&](const std::string& name, const DomainAcc& a) {
    const double md = a.n ? a.dice / a.n : 0, mi = a.n ? a.iou / a.n : 0;
    table.push_back({name, std::to_string(a.n), std::to_string(a.excluded), fmt(md), fmt(mi)});
    out[name] = {{"n", a.n}, {"excluded", a.excluded}, {"mdice", md}, {"miou", mi}};
  };
  for (const auto& [name, a] : acc) emit(name, a);
  emit("overall", all);
  print_table(table);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagediff: staged diffusion lesion segmentation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI config file; flags given on the command line take precedence");
  app.set_version_flag("--version", std::string(stagediff_version()));

  std::string out_root = "stagediff_out";
  uint64_t seed = 0;
  app.add_option("--out-root", out_root, "Root for run manifests and default outputs")
      ->envname("STAGEDIFF_OUT")
      ->capture_default_str();
  app.add_option("--seed", seed, "Seed for all randomness")->capture_default_str();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain dataset");
  std::string gen_out;
  int gen_domains = 6, gen_per = 100, gen_side = 64, gen_folds = 4, gen_empty_domain = 5;
  double gen_empty = 0, gen_empty_domain_frac = 1.0 / 3.0;
  gen->add_option("--out", gen_out, "Output directory (default <out-root>/data)");
  gen->add_option("--domains", gen_domains, "Number of domains")->capture_default_str();
  gen->add_option("--per-domain", gen_per, "Samples per domain")->capture_default_str();
  gen->add_option("--resolution", gen_side, "Image side in pixels")->capture_default_str();
  gen->add_option("--folds", gen_folds, "Cross-validation folds")->capture_default_str();
  gen->add_option("--empty-fraction", gen_empty, "Fraction of empty masks in every domain")->capture_default_str();
  gen->add_option("--empty-domain", gen_empty_domain, "Domain with extra empty masks (-1 for none)")
      ->capture_default_str();
  gen->add_option("--empty-domain-fraction", gen_empty_domain_frac, "Empty fraction in that domain")
      ->capture_default_str();

  // ingest
  auto* ing = app.add_subcommand("ingest", "Import <id>.img.pgm / <id>.mask.pgm pairs");
  std::string ing_root, ing_out;
  int ing_side = 64, ing_folds = 4;
  ing->add_option("--root", ing_root, "Directory of image/mask pairs")->required();
  ing->add_option("--out", ing_out, "Output directory (default <out-root>/data)");
  ing->add_option("--resolution", ing_side, "Resize side")->capture_default_str();
  ing->add_option("--folds", ing_folds, "Cross-validation folds")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Train the conditional feature extractor");
  std::string pre_data, pre_out, pre_log;
  std::optional<int> pre_side;
  std::vector<int> pre_widths;
  TrainOpts pre_opts;
  pre->add_option("--data", pre_data, "Dataset directory")->required();
  pre->add_option("--out", pre_out, "Checkpoint path (default <out-root>/cfenet.ckpt)");
  pre->add_option("--log", pre_log, "JSONL log path (default <out-root>/pretrain.jsonl)");
  pre->add_option("--resolution", pre_side, "Network input side (must match the dataset)");
  pre->add_option("--widths", pre_widths, "Five encoder widths")->expected(5);
  add_train_opts(pre, pre_opts, false);

  // train
  auto* trn = app.add_subcommand("train", "Train the denoising network on a pretrained checkpoint");
  std::string trn_data, trn_ckpt, trn_out, trn_log;
  TrainOpts trn_opts;
  trn->add_option("--data", trn_data, "Dataset directory")->required();
  trn->add_option("--checkpoint", trn_ckpt, "Pretrained checkpoint")->required();
  trn->add_option("--out", trn_out, "Checkpoint path (default <out-root>/model.ckpt)");
  trn->add_option("--log", trn_log, "JSONL log path (default <out-root>/train.jsonl)");
  add_train_opts(trn, trn_opts, true);

  // infer
  auto* inf = app.add_subcommand("infer", "Sample a mask ensemble for one image");
  std::string inf_image, inf_ckpt, inf_out, inf_method = "staged";
  int inf_size = 20, inf_steps = 100, inf_interval = 30;
  double inf_eta = 1.0;
  bool inf_fuse = false;
  inf->add_option("--image", inf_image, "Input PGM image")->required();
  inf->add_option("--checkpoint", inf_ckpt, "Trained checkpoint")->required();
  inf->add_option("--out", inf_out, "Output directory (default <out-root>/infer)");
  inf->add_option("--ensemble-size", inf_size, "Masks in the ensemble (even)")->capture_default_str();
  inf->add_option("--eta", inf_eta, "Refinement stochasticity")->capture_default_str();
  inf->add_option("--interval", inf_interval, "DDIM interval in the probabilistic stage")->capture_default_str();
  inf->add_flag("--fuse", inf_fuse, "Also write the fused consensus");
  inf->add_option("--method", inf_method, "Sampler")
      ->check(CLI::IsMember({"staged", "uniform-noise", "uniform-mask", "one-step-noise", "one-step-mask"}))
      ->capture_default_str();
  inf->add_option("--steps", inf_steps, "DDIM steps for uniform samplers")->capture_default_str();

  // fuse
  auto* fus = app.add_subcommand("fuse", "Fuse binary masks into a consensus");
  std::vector<std::string> fus_masks;
  std::string fus_out;
  int fus_iters = 20;
  double fus_alpha0 = 0.9, fus_beta0 = 0.1, fus_prior = 0.5;
  fus->add_option("--masks", fus_masks, "Mask files or directories of .pgm masks")->required();
  fus->add_option("--out", fus_out, "Consensus PGM path")->required();
  fus->add_option("--iters", fus_iters, "EM iterations")->capture_default_str();
  fus->add_option("--alpha0", fus_alpha0, "Initial sensitivity")->capture_default_str();
  fus->add_option("--beta0", fus_beta0, "Initial false-positive rate")->capture_default_str();
  fus->add_option("--prior", fus_prior, "Foreground prior")->capture_default_str();

  // eval
  auto* evl = app.add_subcommand("eval", "Score predictions or a checkpoint");
  std::string evl_pred, evl_gt, evl_ckpt, evl_data, evl_out, evl_policy = "score-one";
  std::optional<std::string> evl_method;
  int evl_fold = 0, evl_max = 0, evl_interval = 30;
  bool evl_no_fuse = false;
  evl->add_option("--pred", evl_pred, "Directory of predicted masks");
  evl->add_option("--gt", evl_gt, "Directory of ground-truth masks");
  evl->add_option("--checkpoint", evl_ckpt, "Trained checkpoint (model mode)");
  evl->add_option("--data", evl_data, "Dataset directory (model mode, or domain lookup)");
  evl->add_option("--out", evl_out, "Report JSON path (default <out-root>/eval.json)");
  evl->add_option("--empty-policy", evl_policy, "Scoring of empty ground truth")
      ->check(CLI::IsMember({"score-one", "exclude"}))
      ->capture_default_str();
  evl->add_option("--fold", evl_fold, "Held-out fold")->capture_default_str();
  evl->add_option("--max-samples", evl_max, "Limit evaluated samples (0 = all)")->capture_default_str();
  evl->add_option("--interval", evl_interval, "DDIM interval in the probabilistic stage")->capture_default_str();
  evl->add_option("--method", evl_method, "Sampler (default: the trained method)")
      ->check(CLI::IsMember({"staged", "uniform-noise", "uniform-mask", "one-step-noise", "one-step-mask"}));
  evl->add_flag("--no-fuse", evl_no_fuse, "Score the first ensemble member instead of the consensus");

  // profile
  auto* prf = app.add_subcommand("profile", "Gradient profile of the attention module over timestep bins");
  std::string prf_data, prf_ckpt, prf_out, prf_target = "noise";
  int prf_steps = 200, prf_bins = 10, prf_warmup = 500;
  prf->add_option("--data", prf_data, "Dataset directory")->required();
  prf->add_option("--checkpoint", prf_ckpt, "Pretrained checkpoint")->required();
  prf->add_option("--target", prf_target, "Prediction target")->check(CLI::IsMember({"noise", "mask"}))
      ->capture_default_str();
  prf->add_option("--steps", prf_steps, "Measured steps")->capture_default_str();
  prf->add_option("--bins", prf_bins, "Timestep bins")->capture_default_str();
  prf->add_option("--warmup-steps", prf_warmup, "Warmup optimizer steps")->capture_default_str();
  prf->add_option("--out", prf_out, "CSV path (default <out-root>/profile_<target>.csv)");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and score a matrix of configurations");
  std::string abl_data, abl_ckpt, abl_matrix, abl_out, abl_log, abl_policy = "score-one";
  int abl_max = 0;
  TrainOpts abl_opts;
  abl->add_option("--data", abl_data, "Dataset directory")->required();
  abl->add_option("--checkpoint", abl_ckpt, "Pretrained checkpoint")->required();
  abl->add_option("--matrix", abl_matrix, "JSON array of {name, train} rows (default: built-in matrix)");
  abl->add_option("--out", abl_out, "Table JSON path (default <out-root>/ablation.json)");
  abl->add_option("--log", abl_log, "JSONL log path (default <out-root>/ablation.jsonl)");
  abl->add_option("--max-samples", abl_max, "Limit evaluated samples per row (0 = all)")->capture_default_str();
  abl->add_option("--empty-policy", abl_policy, "Scoring of empty ground truth")
      ->check(CLI::IsMember({"score-one", "exclude"}))
      ->capture_default_str();
  add_train_opts(abl, abl_opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  RunManifest manifest(command, argc, argv);
  manifest.seeds["seed"] = seed;
  const fs::path root(out_root);
  const fs::path manifest_path = root / "runs" / (command + "-" + timestamp() + "-" + std::to_string(seed) + ".json");
  auto def = [&](std::string& v, const std::string& name) {
    if (v.empty()) v = (root / name).string();
  };

  int status = 0;
  std::string error;
  try {
    fs::create_directories(root);
    const std::string effective = app.config_to_str(true, false);
    manifest.config["effective_flags"] = effective;

    if (command == "gen-data") {
      def(gen_out, "data");
      const json cfg{{"num_domains", gen_domains},     {"samples_per_domain", gen_per},
                     {"side", gen_side},               {"num_folds", gen_folds},
                     {"empty_mask_fraction", gen_empty}, {"empty_domain", gen_empty_domain},
                     {"empty_domain_fraction", gen_empty_domain_frac}, {"seed", seed}};
      manifest.config["synthetic"] = cfg;
      stagediff_dataset* raw = nullptr;
      call(stagediff_dataset_generate(cfg.dump().c_str(), &raw), "generating dataset");
      DatasetPtr ds(raw);
      call(stagediff_dataset_save(ds.get(), gen_out.c_str()), "saving dataset");
      const std::string mpath = (fs::path(gen_out) / "manifest.json").string();
      manifest.artifact(mpath);
      manifest.data_manifest_checksum = sha256_of(mpath);
      size_t n = 0;
      call(stagediff_dataset_size(ds.get(), &n, nullptr), "dataset size");
      std::printf("wrote %zu samples to %s\n", n, gen_out.c_str());

    } else if (command == "ingest") {
      def(ing_out, "data");
      const json cfg{{"side", ing_side}, {"num_folds", ing_folds}, {"seed", seed}};
      manifest.config["ingest"] = cfg;
      stagediff_dataset* raw = nullptr;
      call(stagediff_dataset_ingest(ing_root.c_str(), cfg.dump().c_str(), &raw), "ingesting " + ing_root);
      DatasetPtr ds(raw);
      call(stagediff_dataset_save(ds.get(), ing_out.c_str()), "saving dataset");
      const std::string mpath = (fs::path(ing_out) / "manifest.json").string();
      manifest.artifact(mpath);
      manifest.data_manifest_checksum = sha256_of(mpath);

    } else if (command == "pretrain") {
      def(pre_out, "cfenet.ckpt");
      def(pre_log, "pretrain.jsonl");
      DatasetPtr ds = load_dataset(pre_data, manifest);
      int side = 0;
      call(stagediff_dataset_size(ds.get(), nullptr, &side), "dataset size");
      if (pre_side && *pre_side != side)
        usage_error("--resolution " + std::to_string(*pre_side) + " does not match the dataset side " +
                    std::to_string(side));
      json net{{"preset", pre_opts.preset}, {"input_side", side}};
      if (!pre_widths.empty()) net["widths"] = pre_widths;
      const json tj = train_json(pre_opts, seed, false);
      manifest.config["network"] = net;
      manifest.config["train"] = tj;
      std::error_code ec;
      fs::remove(pre_log, ec);
      stagediff_model* raw = nullptr;
      call(stagediff_pretrain(ds.get(), net.dump().c_str(), tj.dump().c_str(), pre_log.c_str(), &raw), "pretraining");
      ModelPtr model(raw);
      manifest.artifact(pre_log);
      call(stagediff_model_save(model.get(), pre_out.c_str()), "saving checkpoint");
      manifest.artifact(pre_out);
      const json info = model_info(model.get());
      manifest.config["model"] = info;
      std::printf("pretrained %s (val mDice %.4f)\n", pre_out.c_str(), info["meta"].value("pretrain_val_mdice", 0.0));

    } else if (command == "train") {
      def(trn_out, "model.ckpt");
      def(trn_log, "train.jsonl");
      DatasetPtr ds = load_dataset(trn_data, manifest);
      ModelPtr model = load_model(trn_ckpt);
      manifest.config["input_checkpoint"] = {{"path", trn_ckpt}, {"sha256", sha256_of(trn_ckpt)}};
      const json tj = train_json(trn_opts, seed, true);
      manifest.config["train"] = tj;
      std::error_code ec;
      fs::remove(trn_log, ec);
      call(stagediff_train(ds.get(), model.get(), tj.dump().c_str(), trn_log.c_str()), "training");
      manifest.artifact(trn_log);
      call(stagediff_model_save(model.get(), trn_out.c_str()), "saving checkpoint");
      manifest.artifact(trn_out);
      manifest.config["model"] = model_info(model.get());
      std::printf("trained %s\n", trn_out.c_str());

    } else if (command == "infer") {
      def(inf_out, "infer");
      ModelPtr model = load_model(inf_ckpt);
      manifest.config["input_checkpoint"] = {{"path", inf_ckpt}, {"sha256", sha256_of(inf_ckpt)}};
      const int side = model_info(model.get())["network"]["input_side"].get<int>();
      float* img = nullptr;
      call(stagediff_image_load(inf_image.c_str(), side, &img), "loading image " + inf_image);
      std::unique_ptr<float, void (*)(void*)> img_guard(img, stagediff_buffer_free);
      const size_t n = static_cast<size_t>(side) * side;
      fs::create_directories(inf_out);
      const std::string input_hash = sha256_of(inf_image);
      json prov{{"image", inf_image}, {"image_sha256", input_hash}, {"checkpoint", inf_ckpt}, {"method", inf_method}};

      if (inf_method == "staged") {
        if (inf_size < 2 || inf_size % 2 != 0)
          usage_error("--ensemble-size must be a positive even number (two trunks share it), got " +
                      std::to_string(inf_size));
        const json sj{{"fanout_per_branch", inf_size / 2}, {"eta_refine", inf_eta}, {"ddim_interval", inf_interval},
                      {"seed", seed}};
        manifest.config["sampler"] = sj;
        stagediff_ensemble* raw = nullptr;
        call(stagediff_infer(model.get(), img, n, sj.dump().c_str(), &raw), "sampling");
        EnsemblePtr ens(raw);
        size_t count = 0, pixels = 0;
        call(stagediff_ensemble_size(ens.get(), &count, &pixels), "ensemble size");
        std::vector<uint8_t> all(count * pixels);
        for (size_t i = 0; i < count; ++i) {
          std::vector<uint8_t> m(pixels);
          call(stagediff_ensemble_mask(ens.get(), i, m.data(), pixels), "reading mask");
          std::copy(m.begin(), m.end(), all.begin() + i * pixels);
          char name[32];
          std::snprintf(name, sizeof name, "mask_%02zu.pgm", i);
          save_mask((fs::path(inf_out) / name).string(), m, side, manifest);
        }
        char* info = nullptr;
        call(stagediff_ensemble_info(ens.get(), &info), "ensemble info");
        prov["ensemble"] = json::parse(take(info));
        if (inf_fuse) {
          std::vector<uint8_t> consensus(pixels);
          char* state = nullptr;
          call(stagediff_staple(all.data(), count, pixels, nullptr, consensus.data(), &state), "fusing");
          prov["staple"] = json::parse(take(state));
          save_mask((fs::path(inf_out) / "fused.pgm").string(), consensus, side, manifest);
        }
      } else {
        manifest.config["sampler"] = {{"method", inf_method}, {"steps", inf_steps}, {"seed", seed}};
        std::vector<uint8_t> m(n);
        call(stagediff_infer_baseline(model.get(), img, n, inf_method.c_str(), inf_steps, seed, m.data()), "sampling");
        save_mask((fs::path(inf_out) / "mask_00.pgm").string(), m, side, manifest);
      }
      write_json_file((fs::path(inf_out) / "provenance.json").string(), prov, manifest);

    } else if (command == "fuse") {
      const auto files = list_masks(fus_masks);
      if (files.empty()) usage_error("--masks matched no .pgm files");
      int side = 0;
      std::vector<uint8_t> all;
      for (const auto& f : files) {
        int s = 0;
        auto m = load_mask(f, &s);
        if (side && s != side) throw CommandError(STAGEDIFF_ERR_SHAPE, f + " differs in size from " + files[0]);
        side = s;
        all.insert(all.end(), m.begin(), m.end());
      }
      const size_t pixels = static_cast<size_t>(side) * side;
      const json cfg{{"alpha0", fus_alpha0}, {"beta0", fus_beta0}, {"prior", fus_prior}, {"iterations", fus_iters}};
      manifest.config["staple"] = cfg;
      manifest.config["inputs"] = files;
      std::vector<uint8_t> consensus(pixels);
      char* state = nullptr;
      call(stagediff_staple(all.data(), files.size(), pixels, cfg.dump().c_str(), consensus.data(), &state), "fusing");
      manifest.config["staple_state"] = json::parse(take(state));
      save_mask(fus_out, consensus, side, manifest);
      std::printf("fused %zu masks into %s\n", files.size(), fus_out.c_str());

    } else if (command == "eval") {
      def(evl_out, "eval.json");
      const bool model_mode = !evl_ckpt.empty();
      json report;
      std::vector<std::tuple<std::string, double, double, bool>> rows;
      if (model_mode) {
        if (evl_data.empty()) usage_error("eval with --checkpoint needs --data");
        DatasetPtr ds = load_dataset(evl_data, manifest);
        ModelPtr model = load_model(evl_ckpt);
        manifest.config["input_checkpoint"] = {{"path", evl_ckpt}, {"sha256", sha256_of(evl_ckpt)}};
        json ej{{"fold", evl_fold},
                {"max_samples", evl_max},
                {"fuse", !evl_no_fuse},
                {"empty_policy", evl_policy},
                {"sampler", {{"seed", seed}, {"ddim_interval", evl_interval}}}};
        if (evl_method) ej["method"] = *evl_method;
        manifest.config["eval"] = ej;
        char* s = nullptr;
        call(stagediff_evaluate(model.get(), ds.get(), ej.dump().c_str(), &s), "evaluating");
        report = json::parse(take(s));
        for (const auto& r : report["scores"])
          rows.emplace_back(r["domain"].get<std::string>(), r["dice"].get<double>(), r["iou"].get<double>(),
                            r["both_empty"].get<bool>());
      } else {
        if (evl_pred.empty() || evl_gt.empty()) usage_error("eval needs --pred and --gt, or --checkpoint and --data");
        std::map<std::string, std::string> domains;
        if (!evl_data.empty()) {
          DatasetPtr ds = load_dataset(evl_data, manifest);
          for (const auto& r : dataset_manifest(ds.get())["records"])
            domains[r["id"].get<std::string>()] = r["domain"].get<std::string>();
        }
        report["scores"] = json::array();
        auto stem = [](const fs::path& p) {
          std::string s = p.filename().string();
          for (const char* suf : {".mask.pgm", ".pgm"})
            if (s.size() > std::strlen(suf) && s.ends_with(suf)) return s.substr(0, s.size() - std::strlen(suf));
          return s;
        };
        std::map<std::string, std::string> gt_files;
        for (const auto& f : list_masks({evl_gt})) gt_files[stem(f)] = f;
        int matched = 0;
        for (const auto& pf : list_masks({evl_pred})) {
          const std::string id = stem(pf);
          auto it = gt_files.find(id);
          if (it == gt_files.end()) throw CommandError(STAGEDIFF_ERR_INVALID_ARGUMENT, "no ground truth for " + pf);
          int sp = 0, sg = 0;
          auto p = load_mask(pf, &sp);
          auto g = load_mask(it->second, &sg);
          if (sp != sg) throw CommandError(STAGEDIFF_ERR_SHAPE, pf + " and " + it->second + " differ in size");
          double dice = 0, iou = 0;
          call(stagediff_dice_iou(p.data(), g.data(), p.size(), &dice, &iou), "scoring " + id);
          const bool empty = std::none_of(p.begin(), p.end(), [](uint8_t v) { return v; }) &&
                             std::none_of(g.begin(), g.end(), [](uint8_t v) { return v; });
          auto dom = domains.find(id);
          const std::string domain = dom != domains.end() ? dom->second : "all";
          rows.emplace_back(domain, dice, iou, empty);
          report["scores"].push_back(
              {{"sample_id", id}, {"domain", domain}, {"dice", dice}, {"iou", iou}, {"both_empty", empty}});
          ++matched;
        }
        if (matched == 0) usage_error("--pred matched no masks");
      }
      report["table"] = metric_table(rows, evl_policy == "exclude");
      report["empty_policy"] = evl_policy;
      write_json_file(evl_out, report, manifest);

    } else if (command == "profile") {
      if (prf_out.empty()) prf_out = (root / ("profile_" + prf_target + ".csv")).string();
      DatasetPtr ds = load_dataset(prf_data, manifest);
      ModelPtr model = load_model(prf_ckpt);
      manifest.config["input_checkpoint"] = {{"path", prf_ckpt}, {"sha256", sha256_of(prf_ckpt)}};
      const json pj{{"target", prf_target}, {"steps", prf_steps}, {"bins", prf_bins},
                    {"warmup_steps", prf_warmup}, {"seed", seed}};
      manifest.config["profile"] = pj;
      char* s = nullptr;
      call(stagediff_profile(ds.get(), model.get(), pj.dump().c_str(), prf_out.c_str(), &s), "profiling");
      const json p = json::parse(take(s));
      manifest.artifact(prf_out);
      std::vector<std::vector<std::string>> table{{"bin", "t_lo", "t_hi", "grad_mean", "count"}};
      for (size_t i = 0; i < p["grad_mean"].size(); ++i)
        table.push_back({std::to_string(i), std::to_string(p["bin_lo"][i].get<int>()),
                         std::to_string(p["bin_hi"][i].get<int>()), fmt(p["grad_mean"][i].get<double>()),
                         std::to_string(p["counts"][i].get<int>())});
      print_table(table);

    } else if (command == "ablate") {
      def(abl_out, "ablation.json");
      def(abl_log, "ablation.jsonl");
      DatasetPtr ds = load_dataset(abl_data, manifest);
      ModelPtr model = load_model(abl_ckpt);
      manifest.config["input_checkpoint"] = {{"path", abl_ckpt}, {"sha256", sha256_of(abl_ckpt)}};
      json matrix;
      const json base = train_json(abl_opts, seed, false);
      if (!abl_matrix.empty()) {
        matrix = read_json_file(abl_matrix);
        if (!matrix.is_array()) usage_error(abl_matrix + " must hold a JSON array");
        for (auto& row : matrix) {
          json t = base;
          if (row.contains("train")) t.merge_patch(row["train"]);
          row["train"] = t;
        }
      } else {
        matrix = json::array();
        for (const char* m : {"uniform-noise", "uniform-mask", "one-step-noise", "one-step-mask", "staged"}) {
          json t = base;
          t["method"] = m;
          matrix.push_back({{"name", m}, {"train", t}});
        }
        for (int low : {200, 400}) {
          json t = base;
          t["method"] = "staged";
          t["policy"] = {{"high_threshold", 599}, {"low_threshold", low - 1}};
          matrix.push_back({{"name", "staged-600-" + std::to_string(low)}, {"train", t}});
        }
      }
      const json ej{{"max_samples", abl_max}, {"empty_policy", abl_policy}, {"sampler", {{"seed", seed}}}};
      manifest.config["matrix"] = matrix;
      manifest.config["eval"] = ej;
      std::error_code ec;
      fs::remove(abl_log, ec);
      char* s = nullptr;
      call(stagediff_ablate(ds.get(), model.get(), matrix.dump().c_str(), ej.dump().c_str(), abl_log.c_str(), &s),
           "ablation");
      const json table = json::parse(take(s));
      manifest.artifact(abl_log);
      write_json_file(abl_out, table, manifest);
      std::vector<std::vector<std::string>> rows{{"name", "ok", "mDice", "mIoU", "steps", "train_s"}};
      for (const auto& r : table)
        rows.push_back({r["name"].get<std::string>(), r["ok"].get<bool>() ? "yes" : "FAILED",
                        fmt(r.value("mdice", 0.0)), fmt(r.value("miou", 0.0)),
                        std::to_string(r.value("infer_steps", 0)), fmt(r.value("train_seconds", 0.0))});
      print_table(rows);
    }
  } catch (const CommandError& e) {
    status = e.status;
    error = e.what();
  } catch (const std::exception& e) {
    status = STAGEDIFF_ERR_INTERNAL;
    error = e.what();
  }

  manifest.write(manifest_path, status, error);
  if (status != 0) {
    std::cerr << "stagediff " << command << ": error: " << error << "\n";
    std::cerr << "run manifest: " << manifest_path.string() << "\n";
  }
  return status;
}
