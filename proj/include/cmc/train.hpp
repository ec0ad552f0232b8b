// Optimization: warm-up cosine schedule, plain SGD with selective weight
// decay, the contrastive pretraining loop over modality presets, and the
// supervised segmentation finetuning loop.
//
// Loops are deterministic under a fixed config: batch order, augmentation
// draws, and weight initialization all derive from named RNG streams keyed by
// (seed, epoch, instance id), never by iteration timing.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cmc/augment.hpp"
#include "cmc/config.hpp"
#include "cmc/data.hpp"
#include "cmc/encoder.hpp"
#include "cmc/similarity.hpp"

namespace cmc {

// Linear warm-up to `base` over the first `warmup` epochs, then cosine decay
// to zero at epoch `total`. Warm-up hits base exactly at epoch warmup-1.
inline double lr_schedule(int epoch, double base, int warmup, int total) {
  if (warmup < 0 || warmup >= total)
    throw ConfigError("lr schedule: warmup " + std::to_string(warmup) +
                      " must satisfy 0 <= warmup < total " + std::to_string(total));
  if (epoch < 0 || epoch >= total)
    throw DomainError("lr schedule: epoch " + std::to_string(epoch) + " outside [0, " +
                      std::to_string(total) + ")");
  // Ratio-first keeps the warm-up boundary exact: (W/W) == 1.0, so
  // lr(warmup-1) == base bit-for-bit regardless of base.
  if (epoch < warmup) return base * (static_cast<double>(epoch + 1) / warmup);
  return 0.5 * base * (1.0 + std::cos(M_PI * (epoch - warmup) / (total - warmup)));
}

inline void zero_grads(ModelWeights& mw) {
  for (auto& [name, t] : mw.params) t.zero_grad();
}

// w <- w - lr*(g + wd*w). Biases and batchnorm affine parameters are exempt
// from decay; any non-finite gradient aborts the run.
inline void sgd_step(ModelWeights& mw, double lr, double weight_decay) {
  for (auto& [name, t] : mw.params) {
    auto g = t.grad();
    auto& w = t.mutable_data();
    if (g.size() != w.size())
      throw NumericError("missing gradient buffer for parameter '" + name + "'");
    const bool decays =
        !(name.ends_with("/b") || name.ends_with("/gamma") || name.ends_with("/beta"));
    const float wd = decays ? static_cast<float>(weight_decay) : 0.0f;
    const float flr = static_cast<float>(lr);
    for (size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient in parameter '" + name + "' (divergence)");
      w[i] -= flr * (g[i] + wd * w[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// run history

struct HistoryRow {
  int epoch = 0;
  std::string split;      // "pretrain" | "train" | "val"
  double loss = 0.0;
  double acc = -1.0;      // < 0 -> empty CSV cell
  double iou = -1.0;      // < 0 -> empty CSV cell
  double lr = 0.0;
};

inline std::string fmt_g(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string s = "epoch,split,loss,acc,iou,lr\n";
  for (const auto& r : rows) {
    s += std::to_string(r.epoch) + "," + r.split + "," + fmt_g(r.loss) + ",";
    s += (r.acc < 0 ? "" : fmt_g(r.acc)) + ",";
    s += (r.iou < 0 ? "" : fmt_g(r.iou)) + ",";
    s += fmt_g(r.lr) + "\n";
  }
  return s;
}

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<HistoryRow>& rows) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write history csv " + path.string());
  f << history_csv(rows);
}

// ---------------------------------------------------------------------------
// instance pool

struct PoolInstance {
  uint64_t uid = 0;  // stable stream id: hash of (scene id, patch index)
  PatchSet patch;
};

inline std::vector<PoolInstance> build_pool(const std::vector<SceneBundle>& scenes,
                                            const std::vector<uint64_t>& ids,
                                            const PatchGrid& grid, int resize) {
  std::vector<PoolInstance> pool;
  for (uint64_t id : ids) {
    const SceneBundle* scene = nullptr;
    for (const auto& s : scenes)
      if (s.id == id) scene = &s;
    if (!scene) throw DataError("pool: scene id " + std::to_string(id) + " not in dataset");
    auto patches = extract(*scene, grid, resize);
    for (size_t k = 0; k < patches.size(); ++k)
      pool.push_back({mix_seed({id, static_cast<uint64_t>(k)}), std::move(patches[k])});
  }
  return pool;
}

inline const Tensor& pool_raster(const PoolInstance& inst, const std::string& name) {
  if (name == "sar") return inst.patch.sar;
  if (name == "eo") return inst.patch.eo;
  if (name == "gt") return inst.patch.gt;
  throw ConfigError("unknown raster '" + name + "'");
}

// ---------------------------------------------------------------------------
// training loops

struct TrainState {
  ModelWeights weights;
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  std::vector<HistoryRow> history;
};

// Contrastive pretraining: every step samples B pool instances, builds the
// V = M*N augmented views per instance, embeds each modality's views through
// its branch, and descends the full-graph contrastive loss (mean-reduced so
// the learning rate is batch-size agnostic).
inline TrainState pretrain(const ExperimentConfig& cfg,
                           const std::vector<SceneBundle>& scenes) {
  const Preset pr = preset_info(cfg.preset);
  const int B = cfg.pretrain.batch;
  if (B < 2) throw DomainError("pretraining needs batch >= 2, got " + std::to_string(B));

  EncoderSpec spec{pr.in_channels, cfg.encoder.widths, cfg.encoder.proj_dim};
  spec.validate();
  TrainState st;
  st.weights = init_weights(spec, cfg.seed);

  std::vector<uint64_t> ids;
  for (const auto& s : scenes) ids.push_back(s.id);
  SplitManifest sm = split(ids, cfg.data.split_seed, cfg.data.split_ratio);
  PatchGrid grid = make_grid(cfg.data.extent, cfg.data.patch, cfg.data.stride);
  std::vector<PoolInstance> pool = build_pool(scenes, sm.train, grid, cfg.data.resize);
  if (static_cast<int>(pool.size()) < B)
    throw DataError("pretraining pool has " + std::to_string(pool.size()) +
                    " instances, need at least the batch size " + std::to_string(B));

  const AugmentChain chain = pretrain_chain(cfg.data.resize);
  const std::vector<int> view_modality = preset_view_modalities(pr);
  const int steps = static_cast<int>(pool.size()) / B;

  std::vector<size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0u);
  for (int e = 0; e < cfg.pretrain.epochs; ++e) {
    st.lr = lr_schedule(e, cfg.pretrain.base_lr, cfg.pretrain.warmup, cfg.pretrain.epochs);
    Rng shuffle_rng(mix_seed({cfg.seed, 0xba7c4ull, static_cast<uint64_t>(e)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (int s = 0; s < steps; ++s) {
      std::vector<Tensor> planes(view_modality.size());
      for (int m = 1; m <= pr.m; ++m) {
        std::vector<Tensor> tiles;
        tiles.reserve(static_cast<size_t>(B) * pr.n);
        const bool is_mask = pr.rasters[static_cast<size_t>(m - 1)] == "gt";
        for (int t = 0; t < B; ++t) {
          const PoolInstance& inst = pool[order[static_cast<size_t>(s * B + t)]];
          for (int j = 0; j < pr.n; ++j) {
            const int v = (m - 1) * pr.n + j;
            uint64_t aug_seed = view_stream_seed(cfg.seed, inst.uid, v, e);
            auto out = apply(chain, {{pool_raster(inst, pr.rasters[static_cast<size_t>(m - 1)]),
                                      is_mask}},
                             aug_seed);
            tiles.push_back(out[0].raster);
          }
        }
        Tensor zm = embed_batch(st.weights, m, tiles, /*train=*/true).second;  // [B*N x P]
        for (int j = 0; j < pr.n; ++j)
          planes[static_cast<size_t>((m - 1) * pr.n + j)] = take_rows_strided(zm, j, pr.n);
      }
      EmbeddingSet es{stack_planes(planes), view_modality, cfg.tau};
      Tensor loss = fullgraph_cmc_loss(es, /*mean=*/true);
      if (!std::isfinite(loss.item()))
        throw NumericError("pretraining loss diverged at epoch " + std::to_string(e) +
                           " step " + std::to_string(s));
      zero_grads(st.weights);
      loss.backward();
      sgd_step(st.weights, st.lr, cfg.pretrain.weight_decay);
      loss_sum += loss.item();
      ++st.step;
    }
    st.epoch = e + 1;
    st.history.push_back({e, "pretrain", loss_sum / steps, -1.0, -1.0, st.lr});
  }
  return st;
}

struct FinetuneRun {
  TrainState state;
  std::vector<uint64_t> scenes_used;  // training subset, in split order
  SplitManifest split_used;
};

using EpochCallback = std::function<void(int epoch, ModelWeights& weights, double lr)>;

// Supervised finetuning of the segmentation path on radar patches. With a
// pretrained model, its radar branch is transplanted into a fresh model whose
// decoder stays at the seed's own initialization, so random-init and
// pretrained arms differ only in the encoder. fraction < 1 trains on the
// leading slice of the (seeded, shuffled) training split.
inline FinetuneRun finetune(const ExperimentConfig& cfg, const ModelWeights* pretrained,
                            const std::vector<SceneBundle>& scenes,
                            const EpochCallback& on_epoch = {}) {
  EncoderSpec spec{{3}, cfg.encoder.widths, cfg.encoder.proj_dim};
  spec.validate();
  ModelWeights target = init_weights(spec, cfg.seed);

  FinetuneRun run;
  run.state.weights = pretrained ? transplant_encoder(*pretrained, 1, target) : target;

  std::vector<uint64_t> ids;
  for (const auto& s : scenes) ids.push_back(s.id);
  run.split_used = split(ids, cfg.data.split_seed, cfg.data.split_ratio);
  if (!(cfg.data.fraction > 0.0 && cfg.data.fraction <= 1.0))
    throw ConfigError("finetune: fraction must be in (0,1]");
  size_t subset = static_cast<size_t>(
      std::ceil(cfg.data.fraction * static_cast<double>(run.split_used.train.size())));
  if (subset == 0 || run.split_used.train.empty())
    throw DataError("finetune: empty training subset");
  run.scenes_used.assign(run.split_used.train.begin(),
                         run.split_used.train.begin() + static_cast<long>(subset));

  PatchGrid grid = make_grid(cfg.data.extent, cfg.data.patch, cfg.data.stride);
  std::vector<PoolInstance> pool = build_pool(scenes, run.scenes_used, grid, cfg.data.resize);
  const int batch = std::min<int>(cfg.finetune.batch, static_cast<int>(pool.size()));
  if (batch < 1) throw DataError("finetune: empty training subset");

  const AugmentChain chain = finetune_chain(cfg.data.resize);
  const int steps = static_cast<int>(std::max<size_t>(1, pool.size() / static_cast<size_t>(batch)));

  std::vector<size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0u);
  for (int e = 0; e < cfg.finetune.epochs; ++e) {
    run.state.lr = lr_schedule(e, cfg.finetune.base_lr, cfg.finetune.warmup, cfg.finetune.epochs);
    Rng shuffle_rng(mix_seed({cfg.seed, 0xf17eull, static_cast<uint64_t>(e)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (int s = 0; s < steps; ++s) {
      Tensor total;
      for (int t = 0; t < batch; ++t) {
        const PoolInstance& inst = pool[order[static_cast<size_t>(s * batch + t)]];
        uint64_t aug_seed = view_stream_seed(cfg.seed, inst.uid, 0, e);
        auto aug = apply(chain, {{inst.patch.sar, false}, {inst.patch.gt, true}}, aug_seed);
        Tensor li = bce_with_logits_mean(segment_logits(run.state.weights, aug[0].raster),
                                         aug[1].raster);
        total = total.defined() ? add(total, li) : li;
      }
      Tensor loss = scale(total, 1.0f / static_cast<float>(batch));
      if (!std::isfinite(loss.item()))
        throw NumericError("finetuning loss diverged at epoch " + std::to_string(e) + " step " +
                           std::to_string(s));
      zero_grads(run.state.weights);
      loss.backward();
      sgd_step(run.state.weights, run.state.lr, cfg.finetune.weight_decay);
      loss_sum += loss.item();
      ++run.state.step;
    }
    run.state.epoch = e + 1;
    run.state.history.push_back({e, "train", loss_sum / steps, -1.0, -1.0, run.state.lr});
    if (on_epoch) on_epoch(e, run.state.weights, run.state.lr);
  }
  return run;
}

// ---------------------------------------------------------------------------
// checkpointing

inline void save_weights(const std::filesystem::path& path, const ModelWeights& mw) {
  save_container(path.string(), tensor_map(mw));
}

inline ModelWeights load_weights(const std::filesystem::path& path, const EncoderSpec& spec) {
  return weights_from_map(spec, load_container(path.string()));
}

// Content hash over all tensors (weights + batchnorm buffers) in name order.
inline std::string weights_hash(const ModelWeights& mw) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : tensor_map(mw)) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cmc
