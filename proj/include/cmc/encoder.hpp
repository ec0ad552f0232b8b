// Per-modality encoders, projection heads, and the segmentation decoder.
//
// All modality branches share one structure (EncoderSpec) with independent
// weights. A branch is a stack of conv blocks — 3x3 shape-preserving conv,
// channel bias, relu, then 2x2 average-pool downsampling — followed by global
// average pooling into the feature vector. The projection head is
// linear -> batchnorm -> relu -> linear. Segmentation reuses branch 1's
// spatial features through a small upsampling decoder (or a 1x1 probe head
// with frozen-encoder linear probing in mind) and ends in a sigmoid.
//
// Forward functions take ModelWeights by non-const reference because train
// mode updates batchnorm running statistics in place; in eval mode they are
// pure functions of (weights, input).
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmc/ops.hpp"
#include "cmc/rng.hpp"

namespace cmc {

struct EncoderSpec {
  std::vector<int> in_channels{3, 3, 1};  // one entry per modality
  std::vector<int> widths{8, 16, 32};     // conv block output channels
  int proj_dim = 32;                      // P

  int modalities() const { return static_cast<int>(in_channels.size()); }
  int blocks() const { return static_cast<int>(widths.size()); }
  int feature_dim() const { return widths.back(); }  // H, via global average pool
  int downsample() const { return 1 << blocks(); }

  void validate() const {
    if (in_channels.empty()) throw ConfigError("encoder spec: no modalities");
    for (int c : in_channels)
      if (c < 1) throw ConfigError("encoder spec: non-positive input channels");
    if (widths.empty()) throw ConfigError("encoder spec: no conv blocks");
    for (int w : widths)
      if (w < 1) throw ConfigError("encoder spec: non-positive width");
    if (proj_dim < 1) throw ConfigError("encoder spec: non-positive projection dim");
  }

  // Structure summary; identical for all branches by construction.
  std::string fingerprint() const {
    std::string s = "b";
    for (int w : widths) s += std::to_string(w) + ",";
    s += "p" + std::to_string(proj_dim) + ";in";
    for (int c : in_channels) s += std::to_string(c) + ",";
    return s + hex64(fnv1a64(s));
  }

  // Decoder widths mirror the encoder, capped at the stem width.
  std::vector<int> decoder_widths() const {
    std::vector<int> d;
    for (int i = blocks() - 2; i >= 0; --i) d.push_back(widths[static_cast<size_t>(i)]);
    d.push_back(widths.front());
    return d;
  }
};

struct ModelWeights {
  EncoderSpec spec;
  std::map<std::string, Tensor> params;      // trainable, requires_grad set
  std::map<std::string, BatchNormStats> bn;  // running stats per batchnorm site
  int64_t step = 0;

  std::string fingerprint() const { return spec.fingerprint(); }

  const Tensor& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("missing parameter '" + name + "'");
    return it->second;
  }
};

namespace detail {

inline Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
  const double sd = std::sqrt(2.0 / fan_in);
  int n = shape_numel(shape);
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, sd));
  return Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

// Every tensor draws from its own name-derived stream, so branches are
// independent and insertion order is irrelevant.
inline void add_conv(ModelWeights& mw, uint64_t seed, const std::string& name, int co, int ci,
                     int k) {
  Rng rng(mix_seed({seed, fnv1a64(name)}));
  mw.params[name + "/w"] = he_normal(rng, {co, ci, k, k}, ci * k * k);
  mw.params[name + "/b"] = Tensor::zeros({co}, /*requires_grad=*/true);
}

inline void add_linear(ModelWeights& mw, uint64_t seed, const std::string& name, int in, int out) {
  Rng rng(mix_seed({seed, fnv1a64(name)}));
  mw.params[name + "/w"] = he_normal(rng, {in, out}, in);
  mw.params[name + "/b"] = Tensor::zeros({out}, /*requires_grad=*/true);
}

inline void add_batchnorm(ModelWeights& mw, const std::string& name, int d) {
  mw.params[name + "/gamma"] = Tensor::full({d}, 1.0f);
  mw.params[name + "/gamma"].set_requires_grad(true);
  mw.params[name + "/beta"] = Tensor::zeros({d}, /*requires_grad=*/true);
  mw.bn[name] = BatchNormStats{Tensor::zeros({d}), Tensor::full({d}, 1.0f)};
}

}  // namespace detail

// He-normal conv/linear weights, zero biases, unit batchnorm; deterministic
// per seed with independent streams per tensor.
inline ModelWeights init_weights(const EncoderSpec& spec, uint64_t seed) {
  spec.validate();
  ModelWeights mw;
  mw.spec = spec;
  for (int m = 1; m <= spec.modalities(); ++m) {
    const std::string enc = "enc" + std::to_string(m);
    int ci = spec.in_channels[static_cast<size_t>(m - 1)];
    for (int b = 0; b < spec.blocks(); ++b) {
      int co = spec.widths[static_cast<size_t>(b)];
      detail::add_conv(mw, seed, enc + "/block" + std::to_string(b), co, ci, 3);
      ci = co;
    }
    const std::string proj = "proj" + std::to_string(m);
    detail::add_linear(mw, seed, proj + "/fc1", spec.feature_dim(), spec.proj_dim);
    detail::add_batchnorm(mw, proj + "/bn", spec.proj_dim);
    detail::add_linear(mw, seed, proj + "/fc2", spec.proj_dim, spec.proj_dim);
  }
  // Segmentation decoder over branch 1 features, plus a 1x1 probe head.
  int ci = spec.feature_dim();
  auto dw = spec.decoder_widths();
  for (size_t i = 0; i < dw.size(); ++i) {
    detail::add_conv(mw, seed, "dec/block" + std::to_string(i), dw[i], ci, 3);
    ci = dw[i];
  }
  detail::add_conv(mw, seed, "dec/head", 1, ci, 1);
  detail::add_conv(mw, seed, "probe", 1, spec.feature_dim(), 1);
  return mw;
}

// Spatial features of one branch before pooling: [H x h/2^b x w/2^b].
inline Tensor encoder_features(ModelWeights& mw, int m, const Tensor& tile) {
  const EncoderSpec& spec = mw.spec;
  if (m < 1 || m > spec.modalities())
    throw DomainError("encoder: modality " + std::to_string(m) + " out of range 1.." +
                      std::to_string(spec.modalities()));
  if (tile.rank() != 3 || tile.extent(0) != spec.in_channels[static_cast<size_t>(m - 1)])
    throw ShapeError("encoder: modality " + std::to_string(m) + " expects " +
                     std::to_string(spec.in_channels[static_cast<size_t>(m - 1)]) +
                     " channels, got " + shape_str(tile.shape()));
  Tensor x = tile;
  const std::string enc = "enc" + std::to_string(m);
  for (int b = 0; b < spec.blocks(); ++b) {
    const std::string blk = enc + "/block" + std::to_string(b);
    x = avg_pool2(relu(bias_add_channel(conv2d(x, mw.param(blk + "/w"), 1, 1),
                                        mw.param(blk + "/b"))));
  }
  return x;
}

// Projection head over pooled features [n x H] -> [n x P].
inline Tensor project_features(ModelWeights& mw, int m, const Tensor& feats, bool train) {
  const std::string proj = "proj" + std::to_string(m);
  Tensor x = bias_add_row(matmul(feats, mw.param(proj + "/fc1/w")), mw.param(proj + "/fc1/b"));
  x = batchnorm(x, mw.param(proj + "/bn/gamma"), mw.param(proj + "/bn/beta"), train,
                mw.bn.at(proj + "/bn"));
  x = relu(x);
  return bias_add_row(matmul(x, mw.param(proj + "/fc2/w")), mw.param(proj + "/fc2/b"));
}

// One tile -> (pooled features [H], projected embedding [P]). Train-mode
// batch statistics need >= 2 rows, so single-tile embedding is eval-only.
inline std::pair<Tensor, Tensor> embed(ModelWeights& mw, int m, const Tensor& tile) {
  Tensor f = global_avg_pool(encoder_features(mw, m, tile));
  Tensor z = project_features(mw, m, reshape(f, {1, mw.spec.feature_dim()}), /*train=*/false);
  return {f, reshape(z, {mw.spec.proj_dim})};
}

// A batch of tiles through one branch -> (features [n x H], embeddings [n x P]).
inline std::pair<Tensor, Tensor> embed_batch(ModelWeights& mw, int m,
                                             const std::vector<Tensor>& tiles, bool train) {
  if (tiles.empty()) throw DomainError("embed_batch: empty batch");
  std::vector<Tensor> feats;
  feats.reserve(tiles.size());
  for (const auto& t : tiles) feats.push_back(global_avg_pool(encoder_features(mw, m, t)));
  Tensor f = stack_rows(feats);
  return {f, project_features(mw, m, f, train)};
}

// Segmentation logits [1 x h x w] from branch 1 features. probe = true uses
// the 1x1 head directly on encoder features (linear probing); otherwise the
// conv decoder refines while upsampling.
inline Tensor segment_logits(ModelWeights& mw, const Tensor& tile, bool probe = false) {
  Tensor f = encoder_features(mw, 1, tile);
  if (probe) {
    Tensor x = bias_add_channel(conv2d(f, mw.param("probe/w"), 1, 0), mw.param("probe/b"));
    for (int b = 0; b < mw.spec.blocks(); ++b) x = upsample_nearest2(x);
    return x;
  }
  Tensor x = f;
  auto dw = mw.spec.decoder_widths();
  for (size_t i = 0; i < dw.size(); ++i) {
    const std::string blk = "dec/block" + std::to_string(i);
    x = relu(bias_add_channel(conv2d(upsample_nearest2(x), mw.param(blk + "/w"), 1, 1),
                              mw.param(blk + "/b")));
  }
  return bias_add_channel(conv2d(x, mw.param("dec/head/w"), 1, 0), mw.param("dec/head/b"));
}

inline Tensor segment(ModelWeights& mw, const Tensor& tile, bool probe = false) {
  return sigmoid(segment_logits(mw, tile, probe));
}

// Copies branch-m encoder parameters of `pretrained` into branch 1 of a copy
// of `target`. The projection heads are not carried over and the decoder stays
// at the target's own initialization.
inline ModelWeights transplant_encoder(const ModelWeights& pretrained, int m,
                                       const ModelWeights& target) {
  const EncoderSpec& src = pretrained.spec;
  if (m < 1 || m > src.modalities())
    throw DomainError("transplant: modality " + std::to_string(m) + " out of range");
  if (src.widths != target.spec.widths ||
      src.in_channels[static_cast<size_t>(m - 1)] != target.spec.in_channels[0])
    throw DataError("transplant: encoder fingerprint mismatch, source branch " +
                    std::to_string(m) + " (" + src.fingerprint() + ") vs target (" +
                    target.spec.fingerprint() + ")");
  ModelWeights out = target;  // tensor handles shared with target
  const std::string src_enc = "enc" + std::to_string(m);
  for (int b = 0; b < src.blocks(); ++b) {
    const std::string blk = "/block" + std::to_string(b);
    out.params["enc1" + blk + "/w"] = pretrained.param(src_enc + blk + "/w").clone();
    out.params["enc1" + blk + "/b"] = pretrained.param(src_enc + blk + "/b").clone();
  }
  return out;
}

// Flat name -> tensor view including batchnorm buffers, for checkpointing.
inline std::map<std::string, Tensor> tensor_map(const ModelWeights& mw) {
  std::map<std::string, Tensor> out = mw.params;
  for (const auto& [name, st] : mw.bn) {
    out[name + "/running_mean"] = st.running_mean;
    out[name + "/running_var"] = st.running_var;
  }
  return out;
}

// Rebuilds weights for `spec` from a flat map, validating the inventory.
inline ModelWeights weights_from_map(const EncoderSpec& spec,
                                     const std::map<std::string, Tensor>& flat) {
  ModelWeights mw = init_weights(spec, 0);
  auto expected = tensor_map(mw);
  for (const auto& [name, t] : expected) {
    auto it = flat.find(name);
    if (it == flat.end()) throw DataError("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " +
                      shape_str(it->second.shape()) + ", expected " + shape_str(t.shape()));
  }
  for (const auto& [name, t] : flat)
    if (!expected.count(name)) throw DataError("checkpoint has unexpected tensor '" + name + "'");
  for (auto& [name, t] : mw.params) {
    t = flat.at(name).clone();
    t.set_requires_grad(true);
  }
  for (auto& [name, st] : mw.bn) {
    st.running_mean = flat.at(name + "/running_mean").clone();
    st.running_var = flat.at(name + "/running_var").clone();
  }
  return mw;
}

// Total trainable parameter count of one encoder branch (for parity checks).
inline int branch_param_count(const ModelWeights& mw, int m) {
  int n = 0;
  const std::string enc = "enc" + std::to_string(m) + "/";
  for (const auto& [name, t] : mw.params)
    if (name.rfind(enc, 0) == 0) n += t.numel();
  return n;
}

}  // namespace cmc
