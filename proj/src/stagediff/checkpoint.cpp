// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "stagediff/error.hpp"

namespace stagediff {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'G', 'D', 'C', 'K', 'P', 'T'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  check(in.gcount() == sizeof v, ErrorCode::kFormat, path + ": truncated checkpoint");
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, nlohmann::json header, const std::vector<const nn::ParamList*>& params) {
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto* list : params)
    for (const auto& [name, p] : *list) {
      entries.push_back({{"name", name}, {"shape", p.shape()}, {"offset", offset}, {"count", p.size()}});
      offset += p.size();
    }
  header["tensors"] = entries;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorCode::kIo, "cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<float> buf;
  for (const auto* list : params)
    for (const auto& [name, p] : *list) {
      buf.assign(p.data().begin(), p.data().end());
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  check(out.good(), ErrorCode::kIo, "write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCode::kIo, "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  check(in.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof magic) == 0, ErrorCode::kFormat,
        path + ": not a stagediff checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  check(version == kCheckpointVersion, ErrorCode::kFormat,
        path + ": unsupported checkpoint version " + std::to_string(version));
  const auto hlen = get<std::uint64_t>(in, path);
  check(hlen < (1u << 30), ErrorCode::kFormat, path + ": implausible header length");
  std::string text(hlen, '\0');
  in.read(text.data(), static_cast<std::streamsize>(hlen));
  check(static_cast<std::uint64_t>(in.gcount()) == hlen, ErrorCode::kFormat, path + ": truncated header");
  Checkpoint c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, path + ": bad header: " + e.what());
  }
  std::vector<float> payload;
  {
    const auto start = in.tellg();
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg() - start);
    in.seekg(start);
    check(bytes % sizeof(float) == 0, ErrorCode::kFormat, path + ": payload is not a float32 array");
    payload.resize(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(bytes));
  }
  for (const auto& e : c.header.at("tensors")) {
    TensorBlob b;
    b.shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::size_t>(), cnt = e.at("count").get<std::size_t>();
    check(cnt == numel(b.shape) && off + cnt <= payload.size(), ErrorCode::kFormat,
          path + ": tensor " + e.at("name").get<std::string>() + " lies outside the payload");
    b.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                    payload.begin() + static_cast<std::ptrdiff_t>(off + cnt));
    c.tensors.emplace(e.at("name").get<std::string>(), std::move(b));
  }
  return c;
}

void load_parameters(const Checkpoint& ckpt, nn::ParamList& params) {
  for (auto& [name, p] : params) {
    auto it = ckpt.tensors.find(name);
    check(it != ckpt.tensors.end(), ErrorCode::kFormat, "checkpoint lacks parameter " + name);
    check(it->second.shape == p.shape(), ErrorCode::kShapeMismatch,
          "parameter " + name + " has shape " + shape_str(it->second.shape) + " in checkpoint, model expects " +
              shape_str(p.shape()));
    auto dst = p.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<real>(it->second.values[i]);
  }
}

void save_model(const std::string& path, const ModelBundle& m) {
  check(m.cfenet != nullptr, ErrorCode::kState, "save_model: bundle has no CFENet");
  nlohmann::json h{{"kind", m.dnet ? "model" : "cfenet"},
                   {"network", m.network},
                   {"schedule", schedule_descriptor(m.schedule)},
                   {"policy", m.policy},
                   {"meta", m.meta},
                   {"cfenet_frozen", m.cfenet->frozen()}};
  std::vector<const nn::ParamList*> lists{&m.cfenet->params()};
  if (m.dnet) lists.push_back(&m.dnet->params());
  write_checkpoint(path, std::move(h), lists);
}

ModelBundle load_model(const std::string& path) {
  const Checkpoint c = read_checkpoint(path);
  ModelBundle m;
  try {
    m.network = c.header.at("network").get<NetworkConfig>();
    m.schedule = schedule_from_descriptor(c.header.at("schedule"));
    m.policy = c.header.at("policy").get<StagePolicy>();
    m.meta = c.header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, path + ": malformed header: " + e.what());
  }
  m.cfenet = std::make_unique<Cfenet>(m.network, 0);
  load_parameters(c, m.cfenet->params());
  m.cfenet->set_frozen(c.header.value("cfenet_frozen", true));
  if (c.header.value("kind", "") == "model") {
    m.dnet = std::make_unique<Dnet>(m.network, 0);
    load_parameters(c, m.dnet->params());
  }
  return m;
}

}  // namespace stagediff
