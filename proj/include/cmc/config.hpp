// Experiment configuration: modality presets, hyperparameters, JSON
// load/save with dotted-path overrides, validation, and a content hash used
// to tag reports and checkpoint caches.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmc/common.hpp"

namespace cmc {

// A modality preset names which co-registered rasters feed the contrastive
// branches. All presets expose V = M*N = 6 views per instance; the radar
// raster is always branch 1 so the segmentation encoder can be transplanted
// from any pretrained model.
struct Preset {
  int m = 0;                         // modality branches
  int n = 0;                         // augmentation draws per modality
  std::vector<int> in_channels;      // per branch
  std::vector<std::string> rasters;  // per branch: "sar" | "eo" | "gt"
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"SAR", "SAR+EO", "SAR+GT", "SAR+GT+EO"};
  return names;
}

inline Preset preset_info(const std::string& name) {
  if (name == "SAR") return {1, 6, {3}, {"sar"}};
  if (name == "SAR+EO") return {2, 3, {3, 3}, {"sar", "eo"}};
  if (name == "SAR+GT") return {2, 3, {3, 1}, {"sar", "gt"}};
  if (name == "SAR+GT+EO") return {3, 2, {3, 1, 3}, {"sar", "gt", "eo"}};
  throw ConfigError("unknown preset '" + name + "'");
}

// Modality index (1-based) of each of the V views, in view order.
inline std::vector<int> preset_view_modalities(const Preset& p) {
  std::vector<int> v;
  for (int m = 1; m <= p.m; ++m)
    for (int j = 0; j < p.n; ++j) v.push_back(m);
  return v;
}

struct PhaseConfig {
  double base_lr = 0.1;
  double weight_decay = 5e-4;
  int batch = 8;
  int epochs = 30;
  int warmup = 3;
};

struct DataConfig {
  std::string dir;
  int extent = 64;
  int patch = 32;
  int stride = 16;
  int resize = 32;
  double split_ratio = 0.8;
  uint64_t split_seed = 0;
  double fraction = 1.0;
};

struct EncoderConfig {
  std::vector<int> widths{8, 16, 32};
  int proj_dim = 32;
};

struct ExperimentConfig {
  std::string preset = "SAR+GT+EO";
  float tau = 0.1f;
  uint64_t seed = 0;
  DataConfig data;
  EncoderConfig encoder;
  PhaseConfig pretrain{0.1, 5e-4, 8, 30, 3};
  PhaseConfig finetune{0.0075, 5e-4, 8, 12, 1};

  void validate() const {
    preset_info(preset);  // throws on unknown name
    if (!(tau > 0.0f)) throw ConfigError("tau must be strictly positive");
    auto check_phase = [](const char* which, const PhaseConfig& p) {
      std::string w(which);
      if (!(p.base_lr > 0.0)) throw ConfigError(w + ".base_lr must be strictly positive");
      if (!(p.weight_decay > 0.0)) throw ConfigError(w + ".weight_decay must be strictly positive");
      if (p.batch < 2) throw ConfigError(w + ".batch must be >= 2");
      if (p.epochs < 1) throw ConfigError(w + ".epochs must be >= 1");
      if (p.warmup < 0 || p.warmup >= p.epochs)
        throw ConfigError(w + ".warmup must satisfy 0 <= warmup < epochs");
    };
    check_phase("pretrain", pretrain);
    check_phase("finetune", finetune);
    if (data.extent < 32) throw ConfigError("data.extent must be >= 32");
    if (data.patch < 1 || data.patch > data.extent)
      throw ConfigError("data.patch must be in [1, extent]");
    if (data.stride < 1) throw ConfigError("data.stride must be >= 1");
    if (data.resize < 8) throw ConfigError("data.resize must be >= 8");
    if (!(data.split_ratio > 0.0 && data.split_ratio < 1.0))
      throw ConfigError("data.split_ratio must be in (0,1)");
    if (!(data.fraction > 0.0 && data.fraction <= 1.0))
      throw ConfigError("data.fraction must be in (0,1]");
    if (encoder.widths.empty()) throw ConfigError("encoder.widths must be non-empty");
    for (int w : encoder.widths)
      if (w < 1) throw ConfigError("encoder.widths must be positive");
    if (encoder.proj_dim < 1) throw ConfigError("encoder.proj_dim must be >= 1");
    int down = 1 << encoder.widths.size();
    if (data.resize % down != 0)
      throw ConfigError("data.resize " + std::to_string(data.resize) + " is not divisible by the encoder downsample factor " +
                        std::to_string(down));
  }
};

// Published hyperparameters at full scale: 900-pixel scenes cut into
// 300-pixel patches on a 150 stride, resized to 448; 126-instance batches for
// 500 pretraining epochs, then batch 72 for 25 finetuning epochs.
inline ExperimentConfig full_scale_config() {
  ExperimentConfig c;
  c.data.extent = 900;
  c.data.patch = 300;
  c.data.stride = 150;
  c.data.resize = 448;
  c.pretrain = {0.1, 5e-4, 126, 500, 10};
  c.finetune = {0.0075, 5e-4, 72, 25, 1};
  c.encoder.widths = {8, 16, 32, 64, 64, 64};  // stride 64 over 448-pixel tiles
  c.encoder.proj_dim = 128;
  return c;
}

// ---------------------------------------------------------------------------
// JSON round trip

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["preset"] = c.preset;
  j["tau"] = c.tau;
  j["seed"] = c.seed;
  j["data"] = {{"dir", c.data.dir},
               {"extent", c.data.extent},
               {"patch", c.data.patch},
               {"stride", c.data.stride},
               {"resize", c.data.resize},
               {"split_ratio", c.data.split_ratio},
               {"split_seed", c.data.split_seed},
               {"fraction", c.data.fraction}};
  j["encoder"] = {{"widths", c.encoder.widths}, {"proj_dim", c.encoder.proj_dim}};
  auto phase = [](const PhaseConfig& p) {
    return nlohmann::json{{"base_lr", p.base_lr},
                          {"weight_decay", p.weight_decay},
                          {"batch", p.batch},
                          {"epochs", p.epochs},
                          {"warmup", p.warmup}};
  };
  j["pretrain"] = phase(c.pretrain);
  j["finetune"] = phase(c.finetune);
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    c.preset = j.value("preset", c.preset);
    c.tau = j.value("tau", c.tau);
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.dir = d.value("dir", c.data.dir);
      c.data.extent = d.value("extent", c.data.extent);
      c.data.patch = d.value("patch", c.data.patch);
      c.data.stride = d.value("stride", c.data.stride);
      c.data.resize = d.value("resize", c.data.resize);
      c.data.split_ratio = d.value("split_ratio", c.data.split_ratio);
      c.data.split_seed = d.value("split_seed", c.data.split_seed);
      c.data.fraction = d.value("fraction", c.data.fraction);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      c.encoder.widths = e.value("widths", c.encoder.widths);
      c.encoder.proj_dim = e.value("proj_dim", c.encoder.proj_dim);
    }
    auto phase = [](const nlohmann::json& p, PhaseConfig& out) {
      out.base_lr = p.value("base_lr", out.base_lr);
      out.weight_decay = p.value("weight_decay", out.weight_decay);
      out.batch = p.value("batch", out.batch);
      out.epochs = p.value("epochs", out.epochs);
      out.warmup = p.value("warmup", out.warmup);
    };
    if (j.contains("pretrain")) phase(j.at("pretrain"), c.pretrain);
    if (j.contains("finetune")) phase(j.at("finetune"), c.finetune);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write config snapshot " + path.string());
  f << config_to_json(c).dump(2) << "\n";
}

// Applies one "dotted.path=value" override in place; the value is parsed as
// JSON when possible (numbers, arrays, booleans) and taken verbatim as a
// string otherwise.
inline void apply_override(nlohmann::json& j, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + spec + "' is not of the form path=value");
  std::string path = spec.substr(0, eq), value = spec.substr(eq + 1);
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) parsed = value;

  nlohmann::json* node = &j;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("override '" + spec + "' has an empty path segment");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

// Stable content hash of the resolved config (JSON dump is key-ordered).
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config_to_json(c).dump())));
  return buf;
}

}  // namespace cmc
