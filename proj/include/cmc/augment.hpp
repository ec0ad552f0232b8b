// Seeded augmentation chains for view construction.
//
// A chain is an ordered op list; apply() draws each op's random parameters
// exactly once and applies the same draw to every tile of a co-registered set,
// so all modalities and the mask stay geometrically aligned. Image tiles are
// resampled bilinearly; mask tiles use nearest-neighbor and are re-binarized.
// Each op draws from its own stream derived from (seed, op kind), so the flip
// decisions of two chains sharing a seed agree regardless of the surrounding
// ops.
#pragma once

#include <cmath>
#include <vector>

#include "cmc/image.hpp"
#include "cmc/rng.hpp"

namespace cmc {

struct AugmentOp {
  enum class Kind { ResizeRatio, ResizeTo, RandomCrop, HFlip, VFlip, Rotate, Blur };
  Kind kind;
  float p = 0.0f;              // flip/blur probability
  float ratio = 0.0f;          // resize ratio
  int size = 0;                // resize target, crop size or blur kernel
  float lo = 0.0f, hi = 0.0f;  // rotation degrees or blur sigma range
};

struct AugmentChain {
  std::vector<AugmentOp> ops;
};

// One member of a co-registered tile set.
struct TileView {
  Tensor raster;  // [c x h x w]
  bool is_mask = false;
};

// Blur kernel tracks the tile extent at a 1:20 ratio, rounded to the nearest
// odd value and floored at 3 (448 -> 23, 32 -> 3).
inline int blur_kernel_for(int tile_size) {
  int odd = 2 * static_cast<int>(std::lround((tile_size / 20.0 - 1.0) / 2.0)) + 1;
  return std::max(3, odd);
}

// Heavy chain used when learning representations: enlarge, re-crop, flip,
// rotate, optionally blur.
inline AugmentChain pretrain_chain(int tile_size) {
  if (tile_size < 8) throw ConfigError("pretrain chain: tile size must be >= 8");
  AugmentChain c;
  c.ops.push_back({AugmentOp::Kind::ResizeRatio, 0.0f, 1.2f, 0, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::RandomCrop, 0.0f, 0.0f, tile_size, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::HFlip, 0.5f, 0.0f, 0, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::VFlip, 0.5f, 0.0f, 0, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::Rotate, 0.0f, 0.0f, 0, -45.0f, 45.0f});
  c.ops.push_back({AugmentOp::Kind::Blur, 0.5f, 0.0f, blur_kernel_for(tile_size), 0.1f, 0.2f});
  return c;
}

// Light chain for supervised passes: fixed resize plus flips only.
inline AugmentChain finetune_chain(int tile_size) {
  if (tile_size < 1) throw ConfigError("finetune chain: tile size must be positive");
  AugmentChain c;
  c.ops.push_back({AugmentOp::Kind::ResizeTo, 0.0f, 0.0f, tile_size, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::HFlip, 0.5f, 0.0f, 0, 0.0f, 0.0f});
  c.ops.push_back({AugmentOp::Kind::VFlip, 0.5f, 0.0f, 0, 0.0f, 0.0f});
  return c;
}

namespace detail {

inline Tensor resample(const TileView& t, int oh, int ow) {
  if (t.is_mask) return threshold_mask(resize_nearest(t.raster, oh, ow));
  return resize_bilinear(t.raster, oh, ow);
}

}  // namespace detail

inline std::vector<TileView> apply(const AugmentChain& chain, const std::vector<TileView>& tiles,
                                   uint64_t seed) {
  if (tiles.empty()) throw DomainError("augment apply: empty tile set");
  for (const auto& t : tiles) {
    detail::check_raster(t.raster, "augment apply");
    if (t.raster.extent(1) != tiles[0].raster.extent(1) ||
        t.raster.extent(2) != tiles[0].raster.extent(2))
      throw GeometryError("augment apply: registration mismatch, " +
                          shape_str(t.raster.shape()) + " vs " +
                          shape_str(tiles[0].raster.shape()));
  }
  for (size_t i = 0; i < chain.ops.size(); ++i)
    for (size_t j = i + 1; j < chain.ops.size(); ++j)
      if (chain.ops[i].kind == chain.ops[j].kind)
        throw ConfigError("augment chain: duplicate op kind");

  std::vector<TileView> cur = tiles;
  for (const auto& op : chain.ops) {
    // One stream per op kind; one draw applied to the whole set.
    Rng rng(mix_seed({seed, 0x415547ull, static_cast<uint64_t>(op.kind)}));
    const int h = cur[0].raster.extent(1), w = cur[0].raster.extent(2);
    switch (op.kind) {
      case AugmentOp::Kind::ResizeRatio: {
        if (!(op.ratio > 0.0f)) throw ConfigError("augment: resize ratio must be positive");
        int oh = static_cast<int>(std::floor(h * static_cast<double>(op.ratio)));
        int ow = static_cast<int>(std::floor(w * static_cast<double>(op.ratio)));
        for (auto& t : cur) t.raster = detail::resample(t, oh, ow);
        break;
      }
      case AugmentOp::Kind::ResizeTo: {
        for (auto& t : cur) t.raster = detail::resample(t, op.size, op.size);
        break;
      }
      case AugmentOp::Kind::RandomCrop: {
        if (op.size > h || op.size > w)
          throw GeometryError("augment: crop " + std::to_string(op.size) +
                              " exceeds extent " + std::to_string(h) + "x" + std::to_string(w));
        int y0 = rng.uniform_int(h - op.size + 1);
        int x0 = rng.uniform_int(w - op.size + 1);
        for (auto& t : cur) t.raster = crop(t.raster, y0, x0, op.size);
        break;
      }
      case AugmentOp::Kind::HFlip: {
        if (rng.bernoulli(op.p))
          for (auto& t : cur) t.raster = hflip(t.raster);
        break;
      }
      case AugmentOp::Kind::VFlip: {
        if (rng.bernoulli(op.p))
          for (auto& t : cur) t.raster = vflip(t.raster);
        break;
      }
      case AugmentOp::Kind::Rotate: {
        double deg = rng.uniform(op.lo, op.hi);
        for (auto& t : cur) {
          if (t.is_mask)
            t.raster = threshold_mask(rotate_nearest(t.raster, deg));
          else
            t.raster = rotate_bilinear(t.raster, deg);
        }
        break;
      }
      case AugmentOp::Kind::Blur: {
        // Both draws happen regardless of the coin so the stream is stable.
        bool on = rng.bernoulli(op.p);
        double sigma = rng.uniform(op.lo, op.hi);
        if (on)
          for (auto& t : cur)
            if (!t.is_mask) t.raster = gaussian_blur(t.raster, op.size, sigma);
        break;
      }
    }
  }
  return cur;
}

// Stream id for the n-th view of one scene in one epoch; hashing the
// identifiers keeps results independent of iteration order.
inline uint64_t view_stream_seed(uint64_t global_seed, uint64_t scene_id, int view, int epoch) {
  return mix_seed({global_seed, scene_id, static_cast<uint64_t>(view),
                   static_cast<uint64_t>(epoch)});
}

}  // namespace cmc
