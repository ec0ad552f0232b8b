// Scene-level segmentation metrics (pixel accuracy, building IoU over merged
// probability maps), split evaluation, and the sweep driver that compares
// pretraining presets across epochs / data-fraction axes.
//
// Aggregates are computed from global integer confusion counts across the
// whole split, never by averaging per-scene metrics. IoU with an empty union
// is reported as undefined via a flag, not as NaN.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cmc/config.hpp"
#include "cmc/data.hpp"
#include "cmc/encoder.hpp"
#include "cmc/train.hpp"

namespace cmc {

// Strict threshold: a pixel is building iff prob > threshold.
inline Tensor binarize(const Tensor& prob, float threshold = 0.5f) {
  std::vector<float> out(prob.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    float v = prob.data()[i];
    if (v < 0.0f || v > 1.0f)
      throw DomainError("binarize: probability " + std::to_string(v) + " outside [0,1]");
    out[i] = v > threshold ? 1.0f : 0.0f;
  }
  return Tensor::from(prob.shape(), std::move(out));
}

struct Confusion {
  long long tp = 0, fp = 0, fn = 0, tn = 0;

  long long total() const { return tp + fp + fn + tn; }
  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  bool operator==(const Confusion& o) const = default;
};

inline Confusion confusion_counts(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("confusion: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  Confusion c;
  for (size_t i = 0; i < pred.data().size(); ++i) {
    float p = pred.data()[i], g = gt.data()[i];
    if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f))
      throw DomainError("confusion: masks must be strictly binary");
    if (p == 1.0f)
      g == 1.0f ? ++c.tp : ++c.fp;
    else
      g == 1.0f ? ++c.fn : ++c.tn;
  }
  return c;
}

inline double accuracy(const Confusion& c) {
  if (c.total() == 0) throw DomainError("accuracy: no pixels");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

struct IouValue {
  double value = 0.0;
  bool defined = false;
};

inline IouValue building_iou(const Confusion& c) {
  long long uni = c.tp + c.fp + c.fn;
  if (uni == 0) return {0.0, false};
  return {static_cast<double>(c.tp) / static_cast<double>(uni), true};
}

// ---------------------------------------------------------------------------
// split evaluation

struct SceneMetrics {
  uint64_t id = 0;
  Confusion counts;
  double acc = 0.0;
  IouValue iou;
};

struct MetricsReport {
  std::vector<SceneMetrics> per_scene;
  Confusion total;
  double acc = 0.0;
  IouValue iou;
  double threshold = 0.5;
  int scene_count = 0;
  std::string config_hash;
  int epoch = -1;
};

// Full-scene probability map: segment every patch, resample the per-patch
// probabilities back to grid resolution if needed, and average overlaps.
inline Tensor predict_scene(ModelWeights& w, const SceneBundle& scene, const PatchGrid& grid,
                            int resize) {
  auto patches = extract(scene, grid, resize);
  std::vector<std::pair<std::pair<int, int>, Tensor>> preds;
  preds.reserve(patches.size());
  for (const auto& p : patches) {
    Tensor prob = segment(w, p.sar);
    std::vector<float> v(prob.data().begin(), prob.data().end());  // detach from the graph
    Tensor plain = Tensor::from(prob.shape(), std::move(v));
    if (resize != grid.patch) {
      plain = resize_bilinear(plain, grid.patch, grid.patch);
      for (auto& x : plain.mutable_data()) x = std::min(1.0f, std::max(0.0f, x));
    }
    preds.push_back({{p.y, p.x}, plain});
  }
  return merge(preds, grid, scene.extent);
}

using ScenePredictor = std::function<Tensor(const SceneBundle&)>;

// Evaluation core, parameterized over the probability-map source so oracle
// predictors can stand in for a model.
inline MetricsReport evaluate_with(const ScenePredictor& predict,
                                   const std::vector<SceneBundle>& scenes,
                                   const std::vector<uint64_t>& ids, float threshold = 0.5f) {
  if (ids.empty()) throw DataError("evaluate: empty split");
  MetricsReport rep;
  rep.threshold = threshold;
  for (uint64_t id : ids) {
    const SceneBundle* scene = nullptr;
    for (const auto& s : scenes)
      if (s.id == id) scene = &s;
    if (!scene) throw DataError("evaluate: scene id " + std::to_string(id) + " not in dataset");
    Tensor pred = binarize(predict(*scene), threshold);
    SceneMetrics sm;
    sm.id = id;
    sm.counts = confusion_counts(pred, scene->gt_mask);
    sm.acc = accuracy(sm.counts);
    sm.iou = building_iou(sm.counts);
    rep.total += sm.counts;
    rep.per_scene.push_back(std::move(sm));
  }
  rep.scene_count = static_cast<int>(rep.per_scene.size());
  rep.acc = accuracy(rep.total);
  rep.iou = building_iou(rep.total);
  return rep;
}

inline MetricsReport evaluate_split(ModelWeights& w, const std::vector<SceneBundle>& scenes,
                                    const std::vector<uint64_t>& ids, const PatchGrid& grid,
                                    int resize, float threshold = 0.5f) {
  return evaluate_with(
      [&](const SceneBundle& s) { return predict_scene(w, s, grid, resize); }, scenes, ids,
      threshold);
}

// ---------------------------------------------------------------------------
// sweeps

struct SweepRow {
  std::string axis;
  double axis_value = 0.0;
  std::string preset;  // "Random" or a pretraining preset name
  uint64_t seed = 0;
  bool valid = true;  // false: excluded from cross-preset comparison on this axis
  MetricsReport report;
  std::string weights_hash;
};

struct SweepResult {
  std::string axis;
  std::vector<SweepRow> rows;
  std::vector<uint64_t> seeds;
};

// Supplies pretrained weights per (preset, seed); may cache behind the scenes.
using PretrainedProvider = std::function<const ModelWeights*(const std::string&, uint64_t)>;

// Finetunes and evaluates one point per (axis value, preset, seed). The split
// seed follows the run seed so every preset sees identical splits at a given
// seed (paired comparisons). On the data-fraction axis, presets whose
// contrastive views include the ground-truth mask are flagged invalid rather
// than skipped.
inline SweepResult run_sweep(const std::string& axis, const std::vector<double>& values,
                             const std::vector<std::string>& presets,
                             const std::vector<uint64_t>& seeds, const ExperimentConfig& base,
                             const std::vector<SceneBundle>& scenes,
                             const PretrainedProvider& provider) {
  if (axis != "preset" && axis != "epochs" && axis != "fraction")
    throw ConfigError("sweep: unknown axis '" + axis + "'");
  if (presets.empty() || seeds.empty()) throw ConfigError("sweep: need >= 1 preset and seed");
  if ((axis == "epochs" || axis == "fraction") && values.empty())
    throw ConfigError("sweep: axis '" + axis + "' needs at least one value");
  for (const auto& p : presets)
    if (p != "Random") preset_info(p);  // validates the name

  std::vector<double> points = axis == "preset" ? std::vector<double>{0.0} : values;
  SweepResult result;
  result.axis = axis;
  result.seeds = seeds;
  for (double value : points) {
    for (const auto& preset : presets) {
      for (uint64_t seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.seed = seed;
        cfg.data.split_seed = seed;
        cfg.preset = preset == "Random" ? base.preset : preset;
        if (axis == "epochs") {
          cfg.finetune.epochs = static_cast<int>(value);
          if (cfg.finetune.warmup >= cfg.finetune.epochs)
            cfg.finetune.warmup = std::max(0, cfg.finetune.epochs - 1);
        }
        if (axis == "fraction") cfg.data.fraction = value;

        const ModelWeights* pretrained = nullptr;
        if (preset != "Random") {
          if (!provider)
            throw ConfigError("sweep: preset '" + preset + "' needs a pretrained provider");
          pretrained = provider(preset, seed);
          if (!pretrained)
            throw DataError("sweep: no pretrained weights for preset '" + preset + "' seed " +
                            std::to_string(seed));
        }

        FinetuneRun run = finetune(cfg, pretrained, scenes);
        PatchGrid grid = make_grid(cfg.data.extent, cfg.data.patch, cfg.data.stride);
        SweepRow row;
        row.axis = axis;
        row.axis_value = value;
        row.preset = preset;
        row.seed = seed;
        row.valid = !(axis == "fraction" && preset.find("GT") != std::string::npos);
        row.report = evaluate_split(run.state.weights, scenes, run.split_used.val, grid,
                                    cfg.data.resize);
        row.report.epoch = cfg.finetune.epochs;
        row.report.config_hash = config_hash(cfg);
        row.weights_hash = weights_hash(run.state.weights);
        result.rows.push_back(std::move(row));
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// report emission

inline std::string sweep_csv(const SweepResult& r) {
  std::string s = "axis,axis_value,preset,seed,acc,building_iou,scenes,epoch\n";
  for (const auto& row : r.rows) {
    s += row.axis + "," + fmt_g(row.axis_value) + "," + row.preset + "," +
         std::to_string(row.seed) + "," + fmt_g(row.report.acc) + ",";
    s += (row.report.iou.defined ? fmt_g(row.report.iou.value) : std::string()) + ",";
    s += std::to_string(row.report.scene_count) + "," + std::to_string(row.report.epoch) + "\n";
  }
  return s;
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepResult& r) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report csv " + path.string());
  f << sweep_csv(r);
}

inline nlohmann::json sweep_json(const SweepResult& r, const ExperimentConfig& base) {
  nlohmann::json j;
  j["axis"] = r.axis;
  j["seeds"] = r.seeds;
  j["base_config"] = config_to_json(base);
  j["base_config_hash"] = config_hash(base);
  j["rows"] = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json rj;
    rj["axis_value"] = row.axis_value;
    rj["preset"] = row.preset;
    rj["seed"] = row.seed;
    rj["valid"] = row.valid;
    rj["acc"] = row.report.acc;
    if (row.report.iou.defined)
      rj["building_iou"] = row.report.iou.value;
    else
      rj["building_iou"] = nullptr;
    rj["scenes"] = row.report.scene_count;
    rj["epoch"] = row.report.epoch;
    rj["config_hash"] = row.report.config_hash;
    rj["weights_hash"] = row.weights_hash;
    rj["confusion"] = {{"tp", row.report.total.tp},
                       {"fp", row.report.total.fp},
                       {"fn", row.report.total.fn},
                       {"tn", row.report.total.tn}};
    j["rows"].push_back(std::move(rj));
  }
  return j;
}

inline void write_sweep_json(const std::filesystem::path& path, const SweepResult& r,
                             const ExperimentConfig& base) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write report json " + path.string());
  f << sweep_json(r, base).dump(2) << "\n";
}

}  // namespace cmc
