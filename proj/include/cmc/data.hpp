// Scene model, patch geometry, dataset splitting, disk layout, and the
// synthetic co-registered scene generator.
//
// A SceneBundle holds three co-registered rasters: a 3-channel radar-style
// image (three pseudo-polarization channels sharing one multiplicative
// speckle field), a 3-channel optical-style image (clean tones plus mild
// noise), and a binary building mask. The generator is tuned so the optical
// view is the statistically cleaner one while the radar view stays learnable.
//
// On disk a dataset is manifest.json plus one tensor container per scene at
// scenes/<id>.cmct with entries "sar", "eo", "gt".
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmc/image.hpp"
#include "cmc/rng.hpp"
#include "cmc/serialize.hpp"

namespace cmc {

struct SceneBundle {
  uint64_t id = 0;
  int extent = 0;
  Tensor sar;      // [3 x e x e]
  Tensor eo;       // [3 x e x e]
  Tensor gt_mask;  // [1 x e x e], strictly binary
  double gsd = 0.5;
  std::string source = "synth";

  void validate() const {
    if (!sar.defined() || !eo.defined() || !gt_mask.defined())
      throw DataError("scene bundle: missing raster");
    std::vector<int> img{3, extent, extent}, msk{1, extent, extent};
    if (sar.shape() != img || eo.shape() != img || gt_mask.shape() != msk)
      throw DataError("scene bundle: rasters not co-registered at extent " +
                      std::to_string(extent));
    for (float v : gt_mask.data())
      if (v != 0.0f && v != 1.0f) throw DataError("scene bundle: mask not binary");
  }
};

// ---------------------------------------------------------------------------
// patch geometry

struct PatchGrid {
  int patch = 0;
  int stride = 0;
  std::vector<int> offsets;  // per axis; the full grid is the cartesian square

  int per_axis() const { return static_cast<int>(offsets.size()); }
  int count() const { return per_axis() * per_axis(); }
};

// Offsets 0, r, 2r, ... with the final offset snapped to extent - s so the
// scene edge is always covered.
inline PatchGrid make_grid(int extent, int s, int r) {
  if (s < 1 || s > extent)
    throw GeometryError("grid: patch " + std::to_string(s) + " does not fit extent " +
                        std::to_string(extent));
  if (r < 1) throw GeometryError("grid: stride must be >= 1");
  PatchGrid g{s, r, {}};
  for (int off = 0; off + s <= extent; off += r) g.offsets.push_back(off);
  if (g.offsets.back() != extent - s) g.offsets.push_back(extent - s);
  return g;
}

// One co-registered patch set, tagged with its grid offset.
struct PatchSet {
  int y = 0, x = 0;
  Tensor sar, eo, gt;
};

inline std::vector<PatchSet> extract(const SceneBundle& b, const PatchGrid& g, int resize_to) {
  b.validate();
  if (g.offsets.empty() || g.offsets.back() + g.patch > b.extent)
    throw GeometryError("extract: grid does not fit scene extent " + std::to_string(b.extent));
  if (resize_to < 1) throw GeometryError("extract: non-positive resize target");
  std::vector<PatchSet> out;
  out.reserve(static_cast<size_t>(g.count()));
  for (int y : g.offsets) {
    for (int x : g.offsets) {
      PatchSet p;
      p.y = y;
      p.x = x;
      p.sar = crop(b.sar, y, x, g.patch);
      p.eo = crop(b.eo, y, x, g.patch);
      p.gt = crop(b.gt_mask, y, x, g.patch);
      if (resize_to != g.patch) {
        p.sar = resize_bilinear(p.sar, resize_to, resize_to);
        p.eo = resize_bilinear(p.eo, resize_to, resize_to);
        p.gt = threshold_mask(resize_nearest(p.gt, resize_to, resize_to));
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// Merge per-patch probability maps back into a scene raster; pixels covered
// by several patches take the arithmetic mean.
inline Tensor merge(const std::vector<std::pair<std::pair<int, int>, Tensor>>& preds,
                    const PatchGrid& g, int extent) {
  std::vector<double> sum(static_cast<size_t>(extent) * extent, 0.0);
  std::vector<int> cover(static_cast<size_t>(extent) * extent, 0);
  std::vector<std::pair<int, int>> want;
  for (int y : g.offsets)
    for (int x : g.offsets) want.emplace_back(y, x);
  if (preds.size() != want.size())
    throw DataError("merge: expected " + std::to_string(want.size()) + " patches, got " +
                    std::to_string(preds.size()));
  std::vector<bool> seen(want.size(), false);
  for (const auto& [off, patch] : preds) {
    auto it = std::find(want.begin(), want.end(), off);
    if (it == want.end() || seen[static_cast<size_t>(it - want.begin())])
      throw DataError("merge: unexpected or duplicate patch offset (" +
                      std::to_string(off.first) + "," + std::to_string(off.second) + ")");
    seen[static_cast<size_t>(it - want.begin())] = true;
    if (patch.shape() != std::vector<int>{1, g.patch, g.patch})
      throw ShapeError("merge: patch shape " + shape_str(patch.shape()) + ", expected [1x" +
                       std::to_string(g.patch) + "x" + std::to_string(g.patch) + "]");
    for (int y = 0; y < g.patch; ++y)
      for (int x = 0; x < g.patch; ++x) {
        float v = patch.data()[static_cast<size_t>(y) * g.patch + x];
        if (v < 0.0f || v > 1.0f)
          throw DomainError("merge: probability " + std::to_string(v) + " outside [0,1]");
        size_t idx = static_cast<size_t>(off.first + y) * extent + off.second + x;
        sum[idx] += v;
        cover[idx] += 1;
      }
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i])
      throw DataError("merge: missing patch at offset (" + std::to_string(want[i].first) + "," +
                      std::to_string(want[i].second) + ")");
  std::vector<float> out(sum.size());
  for (size_t i = 0; i < sum.size(); ++i) out[i] = static_cast<float>(sum[i] / cover[i]);
  return Tensor::from({1, extent, extent}, std::move(out));
}

// ---------------------------------------------------------------------------
// synthetic scenes

namespace detail {

// Low-frequency field in [-1,1]: coarse random grid upsampled bilinearly.
inline Tensor smooth_field(Rng& rng, int extent, int cells) {
  std::vector<float> coarse(static_cast<size_t>(cells) * cells);
  for (auto& v : coarse) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return resize_bilinear(Tensor::from({1, cells, cells}, std::move(coarse)), extent, extent);
}

inline float clamp01(double v) { return static_cast<float>(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v)); }

}  // namespace detail

// Deterministic synthetic scene. difficulty in [0,1] controls how harsh the
// radar view is (speckle looks and footprint contrast); 0.5 is the default
// working point.
inline SceneBundle synth_scene(uint64_t seed, int extent, double difficulty = 0.5) {
  if (extent < 32) throw GeometryError("synth_scene: extent must be >= 32");
  if (difficulty < 0.0 || difficulty > 1.0)
    throw DomainError("synth_scene: difficulty outside [0,1]");
  Rng rng(mix_seed({seed, 0x5ce7e5ull}));

  // Footprint: union of 2..6 (possibly rotated) rectangles.
  std::vector<float> mask(static_cast<size_t>(extent) * extent, 0.0f);
  const int nrect = 2 + rng.uniform_int(5);
  for (int rct = 0; rct < nrect; ++rct) {
    double cy = rng.uniform(0.15, 0.85) * extent;
    double cx = rng.uniform(0.15, 0.85) * extent;
    double hh = rng.uniform(0.06, 0.18) * extent;
    double hw = rng.uniform(0.06, 0.18) * extent;
    double ang = rng.bernoulli(0.5) ? 0.0 : rng.uniform(-45.0, 45.0) * M_PI / 180.0;
    double cs = std::cos(ang), sn = std::sin(ang);
    for (int y = 0; y < extent; ++y)
      for (int x = 0; x < extent; ++x) {
        double dy = y - cy, dx = x - cx;
        double u = cs * dx + sn * dy, v = -sn * dx + cs * dy;
        if (std::abs(u) <= hw && std::abs(v) <= hh)
          mask[static_cast<size_t>(y) * extent + x] = 1.0f;
      }
  }

  // Footprint boundary: mask pixels with a non-mask 4-neighbor.
  std::vector<float> edge(static_cast<size_t>(extent) * extent, 0.0f);
  for (int y = 0; y < extent; ++y)
    for (int x = 0; x < extent; ++x) {
      if (mask[static_cast<size_t>(y) * extent + x] == 0.0f) continue;
      bool boundary = y == 0 || y == extent - 1 || x == 0 || x == extent - 1 ||
                      mask[static_cast<size_t>(y - 1) * extent + x] == 0.0f ||
                      mask[static_cast<size_t>(y + 1) * extent + x] == 0.0f ||
                      mask[static_cast<size_t>(y) * extent + x - 1] == 0.0f ||
                      mask[static_cast<size_t>(y) * extent + x + 1] == 0.0f;
      if (boundary) edge[static_cast<size_t>(y) * extent + x] = 1.0f;
    }

  // Optical view: distinct tones per channel plus a smooth texture and mild
  // additive noise.
  Tensor texture = detail::smooth_field(rng, extent, 8);
  const double eo_bg[3] = {0.30, 0.36, 0.28};
  const double eo_fg[3] = {0.74, 0.68, 0.72};
  std::vector<float> eo(static_cast<size_t>(3) * extent * extent);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < extent * extent; ++i) {
      double m = mask[static_cast<size_t>(i)];
      double v = eo_bg[c] * (1.0 - m) + eo_fg[c] * m +
                 0.05 * texture.data()[static_cast<size_t>(i)] + rng.normal(0.0, 0.02);
      eo[static_cast<size_t>(c) * extent * extent + i] = detail::clamp01(v);
    }

  // Radar view: edge-emphasized footprint response times gamma speckle shared
  // across the three pseudo-polarization channels, plus channel noise.
  const double looks = std::max(1.0, 9.0 * (1.0 - difficulty));
  const double sar_bg = 0.22;
  const double sar_fg = sar_bg + 0.35 * (1.1 - difficulty);
  const double sar_edge = sar_fg + 0.40;
  const double gain[3] = {1.0, 0.85, 0.7};
  std::vector<float> speckle(static_cast<size_t>(extent) * extent);
  for (auto& v : speckle) v = static_cast<float>(rng.gamma(looks) / looks);
  std::vector<float> sar(static_cast<size_t>(3) * extent * extent);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < extent * extent; ++i) {
      double m = mask[static_cast<size_t>(i)], e = edge[static_cast<size_t>(i)];
      double intensity = sar_bg * (1.0 - m) + sar_fg * m + (sar_edge - sar_fg) * e;
      double v = intensity * gain[c] * speckle[static_cast<size_t>(i)] + rng.normal(0.0, 0.03);
      sar[static_cast<size_t>(c) * extent * extent + i] = detail::clamp01(v);
    }

  SceneBundle b;
  b.id = seed;
  b.extent = extent;
  b.sar = Tensor::from({3, extent, extent}, std::move(sar));
  b.eo = Tensor::from({3, extent, extent}, std::move(eo));
  b.gt_mask = Tensor::from({1, extent, extent}, std::move(mask));
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// splitting

struct SplitManifest {
  std::vector<uint64_t> train;
  std::vector<uint64_t> val;
  uint64_t seed = 0;
  double ratio = 0.8;
};

// Deterministic shuffle; the first ceil(ratio*n) scenes train, the rest
// validate.
inline SplitManifest split(std::vector<uint64_t> scene_ids, uint64_t seed, double ratio = 0.8) {
  if (scene_ids.size() < 2) throw DataError("split: need at least 2 scenes");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: ratio must be in (0,1)");
  Rng rng(mix_seed({seed, 0x5b117ull}));
  rng.shuffle(scene_ids);
  size_t n_train = static_cast<size_t>(
      std::ceil(ratio * static_cast<double>(scene_ids.size())));
  SplitManifest m;
  m.seed = seed;
  m.ratio = ratio;
  m.train.assign(scene_ids.begin(), scene_ids.begin() + static_cast<long>(n_train));
  m.val.assign(scene_ids.begin() + static_cast<long>(n_train), scene_ids.end());
  return m;
}

// ---------------------------------------------------------------------------
// dataset directory

struct DatasetManifest {
  int version = 1;
  int extent = 64;
  int scene_count = 0;
  double difficulty = 0.5;
  uint64_t generator_seed = 0;
  uint64_t split_seed = 0;
  std::vector<uint64_t> scene_ids;
};

inline std::filesystem::path scene_path(const std::filesystem::path& dir, uint64_t id) {
  return dir / "scenes" / (std::to_string(id) + ".cmct");
}

inline void save_manifest(const std::filesystem::path& dir, const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["extent"] = m.extent;
  j["scene_count"] = m.scene_count;
  j["generator"] = {{"difficulty", m.difficulty}, {"seed", m.generator_seed}};
  j["split_seed"] = m.split_seed;
  j["scenes"] = m.scene_ids;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw DataError("cannot write manifest in " + dir.string());
  f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    f >> j;
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != 1)
      throw DataError("unsupported dataset version " + std::to_string(m.version));
    m.extent = j.at("extent").get<int>();
    m.scene_count = j.at("scene_count").get<int>();
    m.difficulty = j.at("generator").at("difficulty").get<double>();
    m.generator_seed = j.at("generator").at("seed").get<uint64_t>();
    m.split_seed = j.at("split_seed").get<uint64_t>();
    m.scene_ids = j.at("scenes").get<std::vector<uint64_t>>();
    if (static_cast<int>(m.scene_ids.size()) != m.scene_count)
      throw DataError("manifest scene list does not match scene_count");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest.json in " + dir.string() + ": " + e.what());
  }
}

inline void save_scene(const std::filesystem::path& dir, const SceneBundle& b) {
  b.validate();
  save_container(scene_path(dir, b.id).string(),
                 {{"sar", b.sar}, {"eo", b.eo}, {"gt", b.gt_mask}});
}

inline SceneBundle load_scene(const std::filesystem::path& dir, uint64_t id, int extent) {
  auto entries = load_container(scene_path(dir, id).string());
  SceneBundle b;
  b.id = id;
  b.extent = extent;
  auto take = [&](const char* name) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw DataError("scene " + std::to_string(id) + ": missing entry '" + name + "'");
    return it->second;
  };
  b.sar = take("sar");
  b.eo = take("eo");
  b.gt_mask = take("gt");
  b.validate();
  return b;
}

// Generates scene_count scenes (ids 0..n-1, streams hashed per id) and writes
// the dataset directory.
inline DatasetManifest generate_dataset(const std::filesystem::path& dir, int scene_count,
                                        int extent, uint64_t seed, double difficulty = 0.5,
                                        uint64_t split_seed = 0) {
  if (scene_count < 2) throw DataError("dataset: need at least 2 scenes");
  std::error_code ec;
  std::filesystem::create_directories(dir / "scenes", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string());
  DatasetManifest m;
  m.extent = extent;
  m.scene_count = scene_count;
  m.difficulty = difficulty;
  m.generator_seed = seed;
  m.split_seed = split_seed;
  for (int i = 0; i < scene_count; ++i) {
    SceneBundle b = synth_scene(mix_seed({seed, static_cast<uint64_t>(i)}), extent, difficulty);
    b.id = static_cast<uint64_t>(i);
    m.scene_ids.push_back(b.id);
    save_scene(dir, b);
  }
  save_manifest(dir, m);
  return m;
}

inline std::vector<SceneBundle> load_dataset(const std::filesystem::path& dir) {
  DatasetManifest m = load_manifest(dir);
  std::vector<SceneBundle> out;
  out.reserve(m.scene_ids.size());
  for (uint64_t id : m.scene_ids) out.push_back(load_scene(dir, id, m.extent));
  return out;
}

}  // namespace cmc
