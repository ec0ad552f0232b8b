// Command-line entry point: dataset generation, contrastive pretraining,
// segmentation finetuning, evaluation, axis sweeps, and an embedded
// self-check suite.
//
// Exit codes: 0 success, 1 self-check failure or unexpected error,
// 2 configuration error, 3 data error, 4 numeric divergence.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmc/eval.hpp"
#include "cmc/similarity.hpp"

namespace fs = std::filesystem;
using namespace cmc;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir;
  std::string out_dir;
};

void add_common(CLI::App* sub, CommonOpts& o, bool needs_data, bool needs_out) {
  sub->add_option("--config", o.config_path, "experiment config JSON (defaults when omitted)");
  sub->add_option("--set", o.overrides, "dotted-path config override, e.g. pretrain.epochs=5");
  auto* data = sub->add_option("--data", o.data_dir, "dataset directory");
  auto* out = sub->add_option("--out", o.out_dir, "output directory");
  if (needs_data) data->required();
  if (needs_out) out->required();
}

// Serial engine; the env var is validated so sweeps can rely on it, and any
// positive cap is trivially honored by a serial run.
void check_threads_env() {
  const char* v = std::getenv("CMC_THREADS");
  if (!v) return;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (*v == '\0' || *end != '\0' || n < 1)
    throw ConfigError("CMC_THREADS must be a positive integer, got '" + std::string(v) + "'");
}

ExperimentConfig resolve_config(const CommonOpts& o) {
  nlohmann::json j;
  if (o.config_path.empty()) {
    j = config_to_json(ExperimentConfig{});
  } else {
    std::ifstream f(o.config_path);
    if (!f) throw ConfigError("cannot open config file " + o.config_path);
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config parse error in " + o.config_path + ": " + e.what());
    }
  }
  for (const auto& s : o.overrides) apply_override(j, s);
  ExperimentConfig cfg = config_from_json(j);
  if (!o.data_dir.empty()) cfg.data.dir = o.data_dir;
  cfg.validate();
  return cfg;
}

// Creates the output directory and drops the resolved-config snapshot that
// makes every run reproducible from its artifacts alone.
fs::path prepare_out(const std::string& out_dir, const ExperimentConfig& cfg) {
  fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string());
  save_config(dir / "config.json", cfg);
  return dir;
}

std::vector<SceneBundle> load_scenes(const ExperimentConfig& cfg) {
  if (cfg.data.dir.empty())
    throw ConfigError("no dataset directory (set data.dir in the config or pass --data)");
  DatasetManifest m = load_manifest(cfg.data.dir);
  if (m.extent != cfg.data.extent)
    throw DataError("dataset extent " + std::to_string(m.extent) +
                    " does not match config data.extent " + std::to_string(cfg.data.extent));
  return load_dataset(cfg.data.dir);
}

EncoderSpec preset_spec(const ExperimentConfig& cfg) {
  return {preset_info(cfg.preset).in_channels, cfg.encoder.widths, cfg.encoder.proj_dim};
}

EncoderSpec segmentation_spec(const ExperimentConfig& cfg) {
  return {{3}, cfg.encoder.widths, cfg.encoder.proj_dim};
}

// A checkpoint is either a finetuned segmentation model (single branch) or a
// pretrained multi-branch model; try the segmentation inventory first.
ModelWeights load_any_weights(const std::string& path, const ExperimentConfig& cfg) {
  try {
    return load_weights(path, segmentation_spec(cfg));
  } catch (const DataError&) {
    return load_weights(path, preset_spec(cfg));
  }
}

void write_single_report(const fs::path& dir, const std::string& axis, double axis_value,
                         const std::string& arm, const ExperimentConfig& cfg,
                         const MetricsReport& rep, const std::string& whash) {
  SweepResult r;
  r.axis = axis;
  r.seeds = {cfg.seed};
  SweepRow row;
  row.axis = axis;
  row.axis_value = axis_value;
  row.preset = arm;
  row.seed = cfg.seed;
  row.report = rep;
  row.weights_hash = whash;
  r.rows.push_back(std::move(row));
  write_sweep_csv(dir / "report.csv", r);
  write_sweep_json(dir / "report.json", r, cfg);
}

// ---------------------------------------------------------------------------
// subcommand bodies

int run_generate(int scenes, int extent, uint64_t seed, double difficulty, uint64_t split_seed,
                 const std::string& out, bool force) {
  if (scenes < 2)
    throw ConfigError("need at least 2 scenes to allow a train/val split, got " +
                      std::to_string(scenes));
  fs::path dir(out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw DataError("output directory " + dir.string() + " is not empty (pass --force)");
  DatasetManifest m = generate_dataset(dir, scenes, extent, seed, difficulty, split_seed);
  std::cout << "generated " << m.scene_count << " scenes at extent " << m.extent << " into "
            << dir.string() << "\n";
  return 0;
}

int run_pretrain(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  fs::path dir = prepare_out(o.out_dir, cfg);
  auto scenes = load_scenes(cfg);
  TrainState st = pretrain(cfg, scenes);
  save_weights(dir / "pretrain.cmct", st.weights);
  write_history_csv(dir / "history.csv", st.history);
  std::cout << "pretrained preset " << cfg.preset << " for " << st.epoch
            << " epochs; final loss " << fmt_g(st.history.back().loss) << "; weights "
            << weights_hash(st.weights) << "\n";
  return 0;
}

int run_finetune(const CommonOpts& o, const std::string& weights_path, double fraction) {
  ExperimentConfig cfg = resolve_config(o);
  if (fraction > 0.0) cfg.data.fraction = fraction;
  cfg.validate();
  fs::path dir = prepare_out(o.out_dir, cfg);
  auto scenes = load_scenes(cfg);

  ModelWeights pre;
  bool has_pre = !weights_path.empty();
  if (has_pre) pre = load_weights(weights_path, preset_spec(cfg));
  FinetuneRun run = finetune(cfg, has_pre ? &pre : nullptr, scenes);

  save_weights(dir / "model.cmct", run.state.weights);
  write_history_csv(dir / "history.csv", run.state.history);

  PatchGrid grid = make_grid(cfg.data.extent, cfg.data.patch, cfg.data.stride);
  MetricsReport rep = evaluate_split(run.state.weights, scenes, run.split_used.val, grid,
                                     cfg.data.resize);
  rep.epoch = cfg.finetune.epochs;
  rep.config_hash = config_hash(cfg);
  std::string arm = has_pre ? cfg.preset : "Random";
  write_single_report(dir, "fraction", cfg.data.fraction, arm, cfg, rep,
                      weights_hash(run.state.weights));
  std::cout << "finetuned " << arm << " on " << run.scenes_used.size() << " scenes; val acc "
            << fmt_g(rep.acc) << ", building IoU "
            << (rep.iou.defined ? fmt_g(rep.iou.value) : "undefined") << "\n";
  return 0;
}

int run_evaluate(const CommonOpts& o, const std::string& weights_path, const std::string& split) {
  ExperimentConfig cfg = resolve_config(o);
  if (split != "val" && split != "train")
    throw ConfigError("--split must be 'val' or 'train', got '" + split + "'");
  fs::path dir = prepare_out(o.out_dir, cfg);
  auto scenes = load_scenes(cfg);
  ModelWeights w = load_any_weights(weights_path, cfg);

  std::vector<uint64_t> ids;
  for (const auto& s : scenes) ids.push_back(s.id);
  SplitManifest sm = cmc::split(ids, cfg.data.split_seed, cfg.data.split_ratio);
  const auto& chosen = split == "val" ? sm.val : sm.train;

  PatchGrid grid = make_grid(cfg.data.extent, cfg.data.patch, cfg.data.stride);
  MetricsReport rep = evaluate_split(w, scenes, chosen, grid, cfg.data.resize);
  rep.config_hash = config_hash(cfg);
  write_single_report(dir, "eval", 0.0, cfg.preset, cfg, rep, weights_hash(w));
  std::cout << "evaluated " << rep.scene_count << " " << split << " scenes; acc "
            << fmt_g(rep.acc) << ", building IoU "
            << (rep.iou.defined ? fmt_g(rep.iou.value) : "undefined") << "\n";
  return 0;
}

int run_sweep_cmd(const CommonOpts& o, const std::string& axis, std::vector<double> values,
                  std::vector<std::string> presets, std::vector<uint64_t> seeds) {
  ExperimentConfig cfg = resolve_config(o);
  fs::path dir = prepare_out(o.out_dir, cfg);
  auto scenes = load_scenes(cfg);

  if (values.empty()) {
    if (axis == "fraction") values = {0.2, 0.4, 0.6, 0.8, 1.0};
    if (axis == "epochs") values = {5.0, 10.0, 25.0};
  }
  if (presets.empty()) presets = {"Random", cfg.preset};
  if (seeds.empty()) seeds = {cfg.seed};

  // Pretrained weights per (preset, seed), cached on disk under the output
  // directory and keyed by the relevant config hash.
  std::map<std::pair<std::string, uint64_t>, ModelWeights> cache;
  fs::path cache_dir = dir / "pretrained";
  fs::create_directories(cache_dir);
  auto provider = [&](const std::string& preset, uint64_t seed) -> const ModelWeights* {
    auto key = std::make_pair(preset, seed);
    auto it = cache.find(key);
    if (it != cache.end()) return &it->second;
    ExperimentConfig pc = cfg;
    pc.preset = preset;
    pc.seed = seed;
    pc.data.split_seed = seed;
    std::string tag = preset;
    for (auto& ch : tag)
      if (ch == '+') ch = '_';
    fs::path file = cache_dir / (tag + "_" + std::to_string(seed) + "_" + config_hash(pc) +
                                 ".cmct");
    ModelWeights w;
    if (fs::exists(file)) {
      w = load_weights(file, EncoderSpec{preset_info(preset).in_channels, pc.encoder.widths,
                                         pc.encoder.proj_dim});
    } else {
      std::cout << "pretraining " << preset << " seed " << seed << "...\n";
      w = pretrain(pc, scenes).weights;
      save_weights(file, w);
    }
    return &cache.emplace(key, std::move(w)).first->second;
  };

  SweepResult r = run_sweep(axis, values, presets, seeds, cfg, scenes, provider);
  write_sweep_csv(dir / "report.csv", r);
  write_sweep_json(dir / "report.json", r, cfg);
  std::cout << "sweep over " << axis << ": " << r.rows.size() << " rows -> "
            << (dir / "report.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify: embedded oracle suite

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

CheckResult check_loss_oracle() {
  Rng rng(2024);
  double max_dev = 0.0;
  for (int t = 0; t < 200; ++t) {
    int b = 2 + rng.uniform_int(3), m = 1 + rng.uniform_int(3);
    int n = 1 + rng.uniform_int(2);
    if (m * n < 2) n = 2;
    int d = 2 + rng.uniform_int(7);
    std::vector<float> z(static_cast<size_t>(b) * m * n * d);
    for (auto& v : z) v = static_cast<float>(rng.normal());
    EmbeddingSet e;
    e.z = Tensor::from({b, m * n, d}, std::move(z));
    for (int i = 1; i <= m; ++i)
      for (int j = 0; j < n; ++j) e.modality_of_view.push_back(i);
    e.tau = static_cast<float>(rng.uniform(0.5, 1.0));
    double dev = std::abs(static_cast<double>(fullgraph_cmc_loss(e, /*mean=*/true).item()) -
                          loss_oracle(e, /*mean=*/true));
    max_dev = std::max(max_dev, dev);
  }
  return {"loss-oracle agreement (200 draws)", max_dev < 1e-6,
          "max |graph - oracle| = " + fmt_g(max_dev) + " (tol 1e-6)"};
}

CheckResult check_loss_gradient() {
  Rng rng(77);
  double max_rel = 0.0;
  for (int t = 0; t < 5; ++t) {
    const int b = 3, v = 2, d = 4;
    std::vector<float> z(static_cast<size_t>(b) * v * d);
    for (auto& x : z) x = static_cast<float>(rng.uniform(-1.5, 1.5));
    Tensor zt = Tensor::from({b, v, d}, z, /*requires_grad=*/true);
    EmbeddingSet e;
    e.z = zt;
    e.modality_of_view = {1, 1};
    e.tau = 1.0f;
    fullgraph_cmc_loss(e, true).backward();
    auto grad = zt.grad();
    for (int k = 0; k < 8; ++k) {
      int i = rng.uniform_int(b * v * d);
      const float h = 1e-2f;
      auto at = [&](float delta) {
        std::vector<float> zz = z;
        zz[static_cast<size_t>(i)] += delta;
        EmbeddingSet ee;
        ee.z = Tensor::from({b, v, d}, std::move(zz));
        ee.modality_of_view = {1, 1};
        ee.tau = 1.0f;
        return static_cast<double>(fullgraph_cmc_loss(ee, true).item());
      };
      double fd = (at(h) - at(-h)) / (2.0 * h);
      double rel = std::abs(fd - grad[static_cast<size_t>(i)]) /
                   std::max(1e-3, std::abs(fd) + std::abs(grad[static_cast<size_t>(i)]));
      max_rel = std::max(max_rel, rel);
    }
  }
  return {"loss gradient vs finite differences", max_rel < 5e-2,
          "max rel dev = " + fmt_g(max_rel) + " (tol 5e-2)"};
}

CheckResult check_patch_merge() {
  SceneBundle b = synth_scene(5, 64);
  PatchGrid g = make_grid(64, 32, 16);
  std::vector<std::pair<std::pair<int, int>, Tensor>> preds;
  for (const auto& p : extract(b, g, 32)) preds.push_back({{p.y, p.x}, p.gt});
  Tensor merged = merge(preds, g, 64);
  int mismatches = 0;
  for (size_t i = 0; i < merged.data().size(); ++i)
    if (merged.data()[i] != b.gt_mask.data()[i]) ++mismatches;
  bool grids_ok = make_grid(900, 300, 150).count() == 25 && g.count() == 9;
  return {"patch extract -> merge roundtrip", mismatches == 0 && grids_ok,
          std::to_string(mismatches) + " mismatching pixels; grids 25/9 " +
              (grids_ok ? "ok" : "WRONG")};
}

CheckResult check_schedule() {
  bool exact = lr_schedule(9, 0.1, 10, 500) == 0.1;
  double spot = std::abs(lr_schedule(4, 0.1, 10, 500) - 0.05);
  bool mono = true;
  double prev = lr_schedule(10, 0.1, 10, 500);
  for (int e = 11; e < 500; ++e) {
    double cur = lr_schedule(e, 0.1, 10, 500);
    if (cur > prev) mono = false;
    prev = cur;
  }
  return {"warm-up cosine schedule boundaries", exact && spot < 1e-9 && mono,
          std::string("lr(W-1)==base ") + (exact ? "exact" : "WRONG") +
              ", warm-up spot dev = " + fmt_g(spot) + ", post-warm-up monotone " +
              (mono ? "yes" : "NO")};
}

int run_verify(const CommonOpts& o) {
  if (!o.config_path.empty() || !o.overrides.empty())
    resolve_config(o);  // config errors exit 2 before the suite runs
  std::vector<CheckResult> checks = {check_loss_oracle(), check_loss_gradient(),
                                     check_patch_merge(), check_schedule()};
  bool all = true;
  for (const auto& c : checks) {
    all = all && c.pass;
    std::cout << (c.pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << c.detail << "]\n";
  }
  std::cout << (all ? "all checks passed" : "CHECKS FAILED") << "\n";
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contrastive multiview pretraining for radar segmentation — desk-scale lab"};
  app.require_subcommand(1);

  int g_scenes = 10, g_extent = 64;
  uint64_t g_seed = 0, g_split_seed = 0;
  double g_difficulty = 0.5;
  std::string g_out;
  bool g_force = false;
  auto* gen = app.add_subcommand("generate", "write a synthetic co-registered dataset");
  gen->add_option("--scenes", g_scenes, "number of scenes (>= 2)");
  gen->add_option("--extent", g_extent, "scene extent in pixels (>= 32)");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--difficulty", g_difficulty, "radar harshness in [0,1]");
  gen->add_option("--split-seed", g_split_seed, "split seed recorded in the manifest");
  gen->add_option("--out", g_out, "dataset directory")->required();
  gen->add_flag("--force", g_force, "overwrite a non-empty directory");

  CommonOpts pre_o;
  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining for one preset");
  add_common(pre, pre_o, /*needs_data=*/true, /*needs_out=*/true);

  CommonOpts fin_o;
  std::string fin_weights;
  double fin_fraction = 0.0;
  auto* fin = app.add_subcommand("finetune", "supervised segmentation training");
  add_common(fin, fin_o, true, true);
  fin->add_option("--weights", fin_weights, "pretrained checkpoint (omit for random init)");
  fin->add_option("--fraction", fin_fraction, "training-data fraction override in (0,1]");

  CommonOpts ev_o;
  std::string ev_weights, ev_split = "val";
  auto* ev = app.add_subcommand("evaluate", "merged-scene metrics for a checkpoint");
  add_common(ev, ev_o, true, true);
  ev->add_option("--weights", ev_weights, "model checkpoint")->required();
  ev->add_option("--split", ev_split, "scene split: val (default) or train");

  CommonOpts sw_o;
  std::string sw_axis;
  std::vector<double> sw_values;
  std::vector<std::string> sw_presets;
  std::vector<uint64_t> sw_seeds;
  auto* sw = app.add_subcommand("sweep", "finetune+evaluate grid over one axis");
  add_common(sw, sw_o, true, true);
  sw->add_option("--axis", sw_axis, "preset | epochs | fraction")->required();
  sw->add_option("--values", sw_values, "axis values (defaults per axis)");
  sw->add_option("--presets", sw_presets, "arms; 'Random' plus preset names");
  sw->add_option("--seeds", sw_seeds, "run seeds (paired across arms)");

  CommonOpts vf_o;
  auto* vf = app.add_subcommand("verify", "run the embedded oracle suite");
  vf->add_option("--config", vf_o.config_path, "validate this config before the suite");
  vf->add_option("--set", vf_o.overrides, "dotted-path config override");

  try {
    app.parse(argc, argv);
    check_threads_env();
    if (*gen)
      return run_generate(g_scenes, g_extent, g_seed, g_difficulty, g_split_seed, g_out, g_force);
    if (*pre) return run_pretrain(pre_o);
    if (*fin) return run_finetune(fin_o, fin_weights, fin_fraction);
    if (*ev) return run_evaluate(ev_o, ev_weights, ev_split);
    if (*sw) return run_sweep_cmd(sw_o, sw_axis, sw_values, sw_presets, sw_seeds);
    if (*vf) return run_verify(vf_o);
    return 2;
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
