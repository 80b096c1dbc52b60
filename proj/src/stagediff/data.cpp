// Copyright 2026 The stagediff Authors
// SPDX-License-Identifier: Apache-2.0

#include "stagediff/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "stagediff/error.hpp"
#include "stagediff/hash.hpp"
#include "stagediff/random.hpp"

namespace stagediff {

namespace fs = std::filesystem;

namespace {

using Plane = std::vector<float>;

Plane gaussian_blur(const Plane& src, int side, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  auto at = [side](int i) { return std::clamp(i, 0, side - 1); };
  Plane tmp(src.size()), out(src.size());
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * src[y * side + at(x + i)];
      tmp[y * side + x] = static_cast<float>(s);
    }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[at(y + i) * side + x];
      out[y * side + x] = static_cast<float>(s);
    }
  return out;
}

Plane white_noise(Rng& rng, int side, double sd) {
  Plane p(static_cast<std::size_t>(side) * side);
  for (auto& v : p) v = static_cast<float>(sd * rng.normal());
  return p;
}

// Low-frequency noise with a target standard deviation.
Plane smooth_noise(Rng& rng, int side, double sigma, double sd) {
  Plane p = gaussian_blur(white_noise(rng, side, 1.0), side, sigma);
  double m = 0, v = 0;
  for (float x : p) m += x;
  m /= static_cast<double>(p.size());
  for (float x : p) v += (x - m) * (x - m);
  const double scale = sd / std::sqrt(v / static_cast<double>(p.size()) + 1e-12);
  for (auto& x : p) x = static_cast<float>((x - m) * scale);
  return p;
}

void draw_ellipse(std::vector<std::uint8_t>& m, int side, double cx, double cy, double a, double b, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
      if (u * u + v * v <= 1.0) m[y * side + x] = 1;
    }
}

void draw_ring(std::vector<std::uint8_t>& m, int side, double cx, double cy, double r_in, double r_out) {
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double r = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      if (r >= r_in && r <= r_out) m[y * side + x] = 1;
    }
}

struct DomainStyle {
  double background, lesion;
};

SampleRecord render(int domain, bool empty, Rng& rng, int side) {
  const double S = side;
  SampleRecord r;
  r.side = side;
  r.domain = synthetic_domain_names()[static_cast<std::size_t>(domain)];
  r.mask.assign(static_cast<std::size_t>(side) * side, 0);
  const double cx = rng.uniform(0.3, 0.7) * S, cy = rng.uniform(0.3, 0.7) * S;

  static const DomainStyle styles[] = {{-0.6, 0.5}, {0.4, -0.5}, {-0.3, 0.4}, {0.0, 0.6}, {-0.2, 0.15}, {-0.5, 0.3}};
  const DomainStyle st = styles[domain];
  Plane bgtex(r.mask.size(), 0.0f);
  double white_sd = 0.05, blur_sigma = 1.2;

  switch (domain) {
    case 0:  // bright ellipse on dark background
      if (!empty)
        draw_ellipse(r.mask, side, cx, cy, rng.uniform(0.1, 0.22) * S, rng.uniform(0.08, 0.18) * S,
                     rng.uniform(0, std::numbers::pi));
      white_sd = 0.12;
      break;
    case 1:  // dark ellipse, low-frequency background
      if (!empty)
        draw_ellipse(r.mask, side, cx, cy, rng.uniform(0.1, 0.22) * S, rng.uniform(0.08, 0.18) * S,
                     rng.uniform(0, std::numbers::pi));
      bgtex = smooth_noise(rng, side, 4.0, 0.15);
      break;
    case 2: {  // fused blobs
      if (!empty) {
        const int k = rng.uniform_int(2, 4);
        for (int i = 0; i < k; ++i) {
          const double rr = rng.uniform(0.06, 0.12) * S;
          draw_ellipse(r.mask, side, cx + rng.uniform(-0.1, 0.1) * S, cy + rng.uniform(-0.1, 0.1) * S, rr, rr, 0);
        }
      }
      white_sd = 0.08;
      break;
    }
    case 3: {  // rings on a striped background
      if (!empty) {
        const double r_in = rng.uniform(0.08, 0.14) * S;
        draw_ring(r.mask, side, cx, cy, r_in, r_in + rng.uniform(0.05, 0.09) * S);
      }
      const double freq = rng.uniform(0.15, 0.35), phase = rng.uniform(0, 2 * std::numbers::pi);
      const double ang = rng.uniform(0, std::numbers::pi);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          bgtex[y * side + x] =
              static_cast<float>(0.15 * std::sin(freq * (x * std::cos(ang) + y * std::sin(ang)) + phase));
      break;
    }
    case 4:  // low contrast, smooth texture
      if (!empty)
        draw_ellipse(r.mask, side, cx, cy, rng.uniform(0.12, 0.24) * S, rng.uniform(0.1, 0.2) * S,
                     rng.uniform(0, std::numbers::pi));
      bgtex = smooth_noise(rng, side, 2.0, 0.06);
      white_sd = 0.05;
      blur_sigma = 2.0;
      break;
    default: {  // small sparse lesions, frequently absent
      if (!empty) {
        const int k = rng.uniform_int(1, 3);
        for (int i = 0; i < k; ++i) {
          const double rr = rng.uniform(0.05, 0.1) * S;
          draw_ellipse(r.mask, side, rng.uniform(0.2, 0.8) * S, rng.uniform(0.2, 0.8) * S, rr,
                       rr * rng.uniform(0.7, 1.0), rng.uniform(0, std::numbers::pi));
        }
      }
      white_sd = 0.15;
      break;
    }
  }

  Plane soft(r.mask.begin(), r.mask.end());
  soft = gaussian_blur(soft, side, blur_sigma);
  const Plane noise = white_noise(rng, side, white_sd);
  r.image.resize(r.mask.size());
  for (std::size_t i = 0; i < r.image.size(); ++i) {
    double v = st.background + (st.lesion - st.background) * soft[i] + bgtex[i] + noise[i];
    if (domain == 2) v += 0.2 * soft[i] * noise[i] / std::max(white_sd, 1e-6) * 0.5;  // speckle inside lesions
    r.image[i] = dequantize_unit(quantize_unit(static_cast<float>(std::clamp(v, -1.0, 1.0))));
  }
  return r;
}

template <class T>
void update_vec(Sha256& h, const std::vector<T>& v) {
  h.update(v.data(), v.size() * sizeof(T));
}

}  // namespace

std::vector<std::size_t> Dataset::fold_indices(int fold, bool eval) const {
  check(fold >= 0 && fold < num_folds, ErrorCode::kOutOfRange, "fold index out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if ((records[i].fold == fold) == eval) out.push_back(i);
  return out;
}

void SynthConfig::validate() const {
  check(num_domains >= 1 && num_domains <= 6, ErrorCode::kInvalidArgument, "num_domains must be in [1, 6]");
  check(samples_per_domain >= 1, ErrorCode::kInvalidArgument, "samples_per_domain must be >= 1");
  check(side >= 32, ErrorCode::kInvalidArgument, "synthetic side must be >= 32");
  check(empty_mask_fraction >= 0 && empty_mask_fraction < 1, ErrorCode::kInvalidArgument,
        "empty_mask_fraction must be in [0, 1)");
  check(empty_domain_fraction >= 0 && empty_domain_fraction < 1, ErrorCode::kInvalidArgument,
        "empty_domain_fraction must be in [0, 1)");
  check(empty_domain >= -1 && empty_domain < 6, ErrorCode::kInvalidArgument, "empty_domain must be in [-1, 5]");
  check(num_folds >= 2, ErrorCode::kInvalidArgument, "num_folds must be >= 2");
}

const std::vector<std::string>& synthetic_domain_names() {
  static const std::vector<std::string> names{"bright_ellipse", "dark_ellipse", "fused_blobs",
                                              "ring",           "low_contrast", "sparse_lesion"};
  return names;
}

Dataset generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.side = cfg.side;
  d.num_folds = cfg.num_folds;
  d.source = "synthetic";
  d.seed = cfg.seed;
  for (int dom = 0; dom < cfg.num_domains; ++dom) {
    const double frac = dom == cfg.empty_domain ? cfg.empty_domain_fraction : cfg.empty_mask_fraction;
    const int n = cfg.samples_per_domain;
    const int n_empty = static_cast<int>(std::lround(frac * n));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng pick(derive_seed(cfg.seed, {0xe4, static_cast<std::uint64_t>(dom)}));
    std::shuffle(order.begin(), order.end(), pick.engine());
    std::vector<bool> empty(static_cast<std::size_t>(n), false);
    for (int i = 0; i < n_empty; ++i) empty[static_cast<std::size_t>(order[i])] = true;
    for (int i = 0; i < n; ++i) {
      Rng rng(derive_seed(cfg.seed, {0xda7a, static_cast<std::uint64_t>(dom), static_cast<std::uint64_t>(i)}));
      SampleRecord r = render(dom, empty[static_cast<std::size_t>(i)], rng, cfg.side);
      char id[64];
      std::snprintf(id, sizeof id, "d%d_%04d", dom, i);
      r.id = id;
      d.records.push_back(std::move(r));
    }
  }
  const auto folds = assign_folds(d.records.size(), cfg.num_folds, derive_seed(cfg.seed, {0xf01d}));
  for (std::size_t i = 0; i < d.records.size(); ++i) d.records[i].fold = folds[i];
  return d;
}

std::vector<int> assign_folds(std::size_t n, int num_folds, std::uint64_t seed) {
  check(num_folds >= 1, ErrorCode::kInvalidArgument, "num_folds must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<int> folds(n);
  for (std::size_t pos = 0; pos < n; ++pos) folds[order[pos]] = static_cast<int>(pos % num_folds);
  return folds;
}

std::uint8_t quantize_unit(float v) {
  const double u = (std::clamp(static_cast<double>(v), -1.0, 1.0) + 1.0) * 127.5;
  return static_cast<std::uint8_t>(std::lround(u));
}

float dequantize_unit(std::uint8_t q) { return static_cast<float>(q / 127.5 - 1.0); }

std::string record_checksum(const SampleRecord& r) {
  Sha256 h;
  h.update(r.id).update(r.domain);
  update_vec(h, r.image);
  update_vec(h, r.mask);
  return h.hex();
}

nlohmann::json dataset_manifest(const Dataset& d) {
  nlohmann::json recs = nlohmann::json::array();
  std::map<std::string, int> counts;
  for (const auto& r : d.records) {
    int fg = 0;
    for (auto m : r.mask) fg += m;
    recs.push_back({{"id", r.id}, {"domain", r.domain}, {"fold", r.fold}, {"foreground", fg},
                    {"checksum", record_checksum(r)}});
    ++counts[r.domain];
  }
  return {{"format", "stagediff-dataset"}, {"version", 1},         {"source", d.source},
          {"side", d.side},                {"num_folds", d.num_folds}, {"seed", d.seed},
          {"domains", counts},             {"records", recs},          {"checksum", manifest_checksum(d)}};
}

std::string manifest_checksum(const Dataset& d) {
  Sha256 h;
  for (const auto& r : d.records) h.update(record_checksum(r)).update(std::to_string(r.fold));
  return h.hex();
}

Gray8 read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCode::kIo, "cannot open " + path);
  auto token = [&]() {
    std::string t;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
    return t;
  };
  check(token() == "P5", ErrorCode::kFormat, path + ": not a binary PGM (P5)");
  Gray8 g;
  try {
    g.width = std::stoi(token());
    g.height = std::stoi(token());
    g.maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorCode::kFormat, path + ": malformed PGM header");
  }
  check(g.width > 0 && g.height > 0 && g.maxval > 0 && g.maxval < 65536, ErrorCode::kFormat,
        path + ": invalid PGM dimensions");
  const std::size_t n = static_cast<std::size_t>(g.width) * g.height;
  const int bpp = g.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bpp);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  check(static_cast<std::size_t>(in.gcount()) == raw.size(), ErrorCode::kFormat, path + ": truncated pixel data");
  g.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    g.pixels[i] = bpp == 1 ? raw[i] : static_cast<std::uint16_t>(raw[2 * i] << 8 | raw[2 * i + 1]);
  return g;
}

void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
  check(pixels.size() == static_cast<std::size_t>(width) * height, ErrorCode::kShapeMismatch,
        "write_pgm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorCode::kIo, "cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  check(out.good(), ErrorCode::kIo, "write failed: " + path);
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int sw, int sh, int dw, int dh) {
  if (sw == dw && sh == dh) return src;
  std::vector<float> out(static_cast<std::size_t>(dw) * dh);
  for (int y = 0; y < dh; ++y) {
    const double fy = std::clamp((y + 0.5) * sh / dh - 0.5, 0.0, sh - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      const double fx = std::clamp((x + 0.5) * sw / dw - 0.5, 0.0, sw - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      const double top = src[y0 * sw + x0] * (1 - wx) + src[y0 * sw + x1] * wx;
      const double bot = src[y1 * sw + x0] * (1 - wx) + src[y1 * sw + x1] * wx;
      out[y * dw + x] = static_cast<float>(top * (1 - wy) + bot * wy);
    }
  }
  return out;
}

std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& src, int sw, int sh, int dw, int dh) {
  if (sw == dw && sh == dh) return src;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(dw) * dh);
  for (int y = 0; y < dh; ++y) {
    const int sy = std::min(sh - 1, static_cast<int>((y + 0.5) * sh / dh));
    for (int x = 0; x < dw; ++x) out[y * dw + x] = src[sy * sw + std::min(sw - 1, static_cast<int>((x + 0.5) * sw / dw))];
  }
  return out;
}

Dataset ingest_directory(const std::string& root, const IngestConfig& cfg) {
  check(cfg.side >= 16 && cfg.side % 16 == 0, ErrorCode::kInvalidArgument, "ingest side must be a multiple of 16");
  check(fs::is_directory(root), ErrorCode::kIo, "not a directory: " + root);
  std::map<std::string, std::string> imgs, masks;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    auto ends = [&](const std::string& suf) {
      return name.size() > suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends(".img.pgm")) imgs[name.substr(0, name.size() - 8)] = e.path().string();
    else if (ends(".mask.pgm")) masks[name.substr(0, name.size() - 9)] = e.path().string();
  }
  for (const auto& [id, p] : imgs) check(masks.count(id), ErrorCode::kFormat, "image without mask: " + p);
  for (const auto& [id, p] : masks) check(imgs.count(id), ErrorCode::kFormat, "mask without image: " + p);
  check(!imgs.empty(), ErrorCode::kInvalidArgument, "no <id>.img.pgm / <id>.mask.pgm pairs in " + root);

  Dataset d;
  d.side = cfg.side;
  d.num_folds = cfg.num_folds;
  d.source = "ingest";
  d.seed = cfg.seed;
  for (const auto& [id, ipath] : imgs) {
    const Gray8 gi = read_pgm(ipath);
    const Gray8 gm = read_pgm(masks[id]);
    check(gi.width == gm.width && gi.height == gm.height, ErrorCode::kShapeMismatch,
          "image and mask sizes differ for " + id);
    std::vector<std::uint8_t> m(gm.pixels.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto v = gm.pixels[i];
      check(v == 0 || v == gm.maxval, ErrorCode::kFormat, "non-binary mask value " + std::to_string(v) + " in " + masks[id]);
      m[i] = v * 255 / gm.maxval >= 128 ? 1 : 0;
    }
    const auto [lo, hi] = std::minmax_element(gi.pixels.begin(), gi.pixels.end());
    const double range = std::max(1.0, static_cast<double>(*hi) - *lo);
    std::vector<float> im(gi.pixels.size());
    for (std::size_t i = 0; i < im.size(); ++i) im[i] = static_cast<float>(2.0 * (gi.pixels[i] - *lo) / range - 1.0);
    SampleRecord r;
    r.id = id;
    r.domain = "ingested";
    r.side = cfg.side;
    r.image = resize_bilinear(im, gi.width, gi.height, cfg.side, cfg.side);
    r.mask = resize_nearest(m, gm.width, gm.height, cfg.side, cfg.side);
    d.records.push_back(std::move(r));
  }
  const auto folds = assign_folds(d.records.size(), cfg.num_folds, derive_seed(cfg.seed, {0xf01d}));
  for (std::size_t i = 0; i < d.records.size(); ++i) d.records[i].fold = folds[i];
  return d;
}

void save_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(dir);
  for (const auto& r : d.records) {
    std::vector<std::uint8_t> img(r.image.size()), msk(r.mask.size());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = quantize_unit(r.image[i]);
    for (std::size_t i = 0; i < msk.size(); ++i) msk[i] = r.mask[i] ? 255 : 0;
    write_pgm((fs::path(dir) / (r.id + ".img.pgm")).string(), r.side, r.side, img);
    write_pgm((fs::path(dir) / (r.id + ".mask.pgm")).string(), r.side, r.side, msk);
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  check(out.good(), ErrorCode::kIo, "cannot write manifest in " + dir);
  out << dataset_manifest(d).dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  check(in.good(), ErrorCode::kIo, "missing dataset manifest: " + mpath.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, mpath.string() + ": " + e.what());
  }
  check(j.value("format", "") == "stagediff-dataset", ErrorCode::kFormat, mpath.string() + ": not a dataset manifest");
  Dataset d;
  d.side = j.at("side").get<int>();
  d.num_folds = j.value("num_folds", 4);
  d.source = j.value("source", "");
  d.seed = j.value("seed", std::uint64_t{0});
  for (const auto& jr : j.at("records")) {
    SampleRecord r;
    r.id = jr.at("id").get<std::string>();
    r.domain = jr.at("domain").get<std::string>();
    r.fold = jr.at("fold").get<int>();
    r.side = d.side;
    const Gray8 gi = read_pgm((fs::path(dir) / (r.id + ".img.pgm")).string());
    const Gray8 gm = read_pgm((fs::path(dir) / (r.id + ".mask.pgm")).string());
    check(gi.width == d.side && gi.height == d.side && gm.width == d.side && gm.height == d.side,
          ErrorCode::kShapeMismatch, "record " + r.id + " does not match the manifest side");
    r.image.resize(gi.pixels.size());
    for (std::size_t i = 0; i < r.image.size(); ++i) r.image[i] = dequantize_unit(static_cast<std::uint8_t>(gi.pixels[i]));
    r.mask.resize(gm.pixels.size());
    for (std::size_t i = 0; i < r.mask.size(); ++i) r.mask[i] = gm.pixels[i] >= 128 ? 1 : 0;
    check(record_checksum(r) == jr.value("checksum", ""), ErrorCode::kFormat, "checksum mismatch for record " + r.id);
    d.records.push_back(std::move(r));
  }
  return d;
}

void flip_sample(std::vector<float>& image, std::vector<std::uint8_t>& mask, int side, bool horizontal, bool vertical) {
  for (int y = 0; y < side; ++y) {
    if (horizontal) {
      std::reverse(image.begin() + y * side, image.begin() + (y + 1) * side);
      std::reverse(mask.begin() + y * side, mask.begin() + (y + 1) * side);
    }
  }
  if (vertical)
    for (int y = 0; y < side / 2; ++y) {
      std::swap_ranges(image.begin() + y * side, image.begin() + (y + 1) * side, image.begin() + (side - 1 - y) * side);
      std::swap_ranges(mask.begin() + y * side, mask.begin() + (y + 1) * side, mask.begin() + (side - 1 - y) * side);
    }
}

}  // namespace stagediff
