#include <gtest/gtest.h>

#include <cmath>

#include "cmc/encoder.hpp"
#include "reference.hpp"

namespace {

using cmc::EncoderSpec;
using cmc::ModelWeights;
using cmc::Rng;
using cmc::Tensor;
using ref::Vec;

EncoderSpec tiny_spec() {
  EncoderSpec s;
  s.in_channels = {2};
  s.widths = {3, 4};
  s.proj_dim = 5;
  return s;
}

bool same_data(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// initialization

TEST(InitWeights, DeterministicPerSeed) {
  EncoderSpec s;
  s.in_channels = {3, 1};
  ModelWeights a = cmc::init_weights(s, 7);
  ModelWeights b = cmc::init_weights(s, 7);
  ModelWeights c = cmc::init_weights(s, 8);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (const auto& [name, t] : a.params) ASSERT_TRUE(same_data(t, b.params.at(name))) << name;
  EXPECT_FALSE(same_data(a.param("enc1/block0/w"), c.param("enc1/block0/w")));
}

TEST(InitWeights, BranchesAreIndependent) {
  EncoderSpec s;
  s.in_channels = {3, 3, 3};
  ModelWeights w = cmc::init_weights(s, 1);
  EXPECT_FALSE(same_data(w.param("enc1/block0/w"), w.param("enc2/block0/w")));
  EXPECT_FALSE(same_data(w.param("enc2/block1/w"), w.param("enc3/block1/w")));
  EXPECT_FALSE(same_data(w.param("proj1/fc1/w"), w.param("proj2/fc1/w")));
}

TEST(InitWeights, HeScaleMatchesFanIn) {
  EncoderSpec s;
  s.in_channels = {1};
  s.widths = {4, 1000};
  s.proj_dim = 64;
  ModelWeights w = cmc::init_weights(s, 3);
  const Tensor& fc1 = w.param("proj1/fc1/w");  // [1000 x 64], fan_in 1000
  double ss = 0.0;
  for (float v : fc1.data()) ss += static_cast<double>(v) * v;
  double sd = std::sqrt(ss / fc1.numel());
  double target = std::sqrt(2.0 / 1000.0);
  EXPECT_GT(sd, 0.9 * target);
  EXPECT_LT(sd, 1.1 * target);
  // biases zero, batchnorm at identity
  for (float v : w.param("proj1/fc1/b").data()) ASSERT_EQ(v, 0.0f);
  for (float v : w.param("proj1/bn/gamma").data()) ASSERT_EQ(v, 1.0f);
  for (float v : w.param("proj1/bn/beta").data()) ASSERT_EQ(v, 0.0f);
}

TEST(InitWeights, StructuralParityAcrossBranches) {
  EncoderSpec s;
  s.in_channels = {3, 3};
  ModelWeights w = cmc::init_weights(s, 5);
  EXPECT_EQ(cmc::branch_param_count(w, 1), cmc::branch_param_count(w, 2));

  EncoderSpec su;
  su.in_channels = {3, 1};
  ModelWeights wu = cmc::init_weights(su, 5);
  // branches differ only by the stem conv's input channels
  int delta = (3 - 1) * su.widths[0] * 3 * 3;
  EXPECT_EQ(cmc::branch_param_count(wu, 1) - cmc::branch_param_count(wu, 2), delta);
}

// ---------------------------------------------------------------------------
// embedding path

TEST(Embed, FiniteOnZeroTileAndDeterministic) {
  ModelWeights w = cmc::init_weights(tiny_spec(), 11);
  Tensor tile = Tensor::zeros({2, 8, 8});
  auto [f, z] = cmc::embed(w, 1, tile);
  EXPECT_EQ(f.shape(), (std::vector<int>{4}));
  EXPECT_EQ(z.shape(), (std::vector<int>{5}));
  for (float v : z.data()) ASSERT_TRUE(std::isfinite(v));

  Rng rng(12);
  Tensor t2 = Tensor::from({2, 8, 8}, ref::random_values(rng, 2 * 8 * 8, 0.0, 1.0));
  auto [f1, z1] = cmc::embed(w, 1, t2);
  auto [f2, z2] = cmc::embed(w, 1, t2);
  EXPECT_TRUE(same_data(z1, z2));
}

TEST(Embed, RejectsBadModalityAndChannels) {
  ModelWeights w = cmc::init_weights(tiny_spec(), 1);
  Tensor tile = Tensor::zeros({2, 8, 8});
  EXPECT_THROW(cmc::embed(w, 2, tile), cmc::DomainError);
  EXPECT_THROW(cmc::embed(w, 0, tile), cmc::DomainError);
  EXPECT_THROW(cmc::embed(w, 1, Tensor::zeros({3, 8, 8})), cmc::ShapeError);
}

TEST(Embed, BatchEvalMatchesSingleTileEmbed) {
  ModelWeights w = cmc::init_weights(tiny_spec(), 21);
  Rng rng(22);
  std::vector<Tensor> tiles;
  for (int i = 0; i < 3; ++i)
    tiles.push_back(Tensor::from({2, 8, 8}, ref::random_values(rng, 2 * 8 * 8, 0.0, 1.0)));
  auto [fb, zb] = cmc::embed_batch(w, 1, tiles, /*train=*/false);
  ASSERT_EQ(zb.shape(), (std::vector<int>{3, 5}));
  for (int i = 0; i < 3; ++i) {
    auto [f, z] = cmc::embed(w, 1, tiles[static_cast<size_t>(i)]);
    for (int j = 0; j < 5; ++j) ASSERT_EQ(zb.at({i, j}), z.data()[j]) << "tile " << i;
  }
}

TEST(Embed, GradientWrtTileMatchesDoubleReference) {
  EncoderSpec spec = tiny_spec();
  ModelWeights w = cmc::init_weights(spec, 31);
  Rng rng(32);
  Tensor tile = Tensor::from({2, 8, 8}, ref::random_values(rng, 2 * 8 * 8, 0.1, 1.0), true);
  auto [f, z] = cmc::embed(w, 1, tile);
  cmc::reduce_sum(cmc::mul(z, z)).backward();

  // independent double forward of the same architecture
  Vec w0 = ref::to_f64(w.param("enc1/block0/w").data());
  Vec b0 = ref::to_f64(w.param("enc1/block0/b").data());
  Vec w1 = ref::to_f64(w.param("enc1/block1/w").data());
  Vec b1 = ref::to_f64(w.param("enc1/block1/b").data());
  Vec fw1 = ref::to_f64(w.param("proj1/fc1/w").data());
  Vec fb1 = ref::to_f64(w.param("proj1/fc1/b").data());
  Vec fw2 = ref::to_f64(w.param("proj1/fc2/w").data());
  Vec fb2 = ref::to_f64(w.param("proj1/fc2/b").data());

  auto block = [](const Vec& x, int ci, int h, int w_, const Vec& kw, const Vec& kb, int co) {
    Vec y = ref::conv2d(x, ci, h, w_, kw, co, 3, 1, 1);
    for (int c = 0; c < co; ++c)
      for (int i = 0; i < h * w_; ++i) {
        double v = y[static_cast<size_t>(c) * h * w_ + i] + kb[static_cast<size_t>(c)];
        y[static_cast<size_t>(c) * h * w_ + i] = v > 0 ? v : 0;
      }
    Vec p(static_cast<size_t>(co) * (h / 2) * (w_ / 2));
    for (int c = 0; c < co; ++c)
      for (int yy = 0; yy < h / 2; ++yy)
        for (int xx = 0; xx < w_ / 2; ++xx) {
          const double* q = &y[(static_cast<size_t>(c) * h + 2 * yy) * w_ + 2 * xx];
          p[(static_cast<size_t>(c) * (h / 2) + yy) * (w_ / 2) + xx] =
              0.25 * (q[0] + q[1] + q[w_] + q[w_ + 1]);
        }
    return p;
  };

  auto forward = [&](const Vec& x) {
    Vec a = block(x, 2, 8, 8, w0, b0, 3);
    Vec b = block(a, 3, 4, 4, w1, b1, 4);
    Vec feat(4);
    for (int c = 0; c < 4; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 4; ++i) acc += b[static_cast<size_t>(c) * 4 + i];
      feat[static_cast<size_t>(c)] = acc / 4.0;
    }
    Vec h1(5, 0.0);
    for (int j = 0; j < 5; ++j) {
      for (int i = 0; i < 4; ++i) h1[static_cast<size_t>(j)] += feat[static_cast<size_t>(i)] * fw1[static_cast<size_t>(i) * 5 + j];
      h1[static_cast<size_t>(j)] += fb1[static_cast<size_t>(j)];
      h1[static_cast<size_t>(j)] /= std::sqrt(1.0 + 1e-5);  // eval batchnorm at identity stats
      if (h1[static_cast<size_t>(j)] < 0) h1[static_cast<size_t>(j)] = 0;
    }
    double loss = 0.0;
    for (int j = 0; j < 5; ++j) {
      double acc = fb2[static_cast<size_t>(j)];
      for (int i = 0; i < 5; ++i) acc += h1[static_cast<size_t>(i)] * fw2[static_cast<size_t>(i) * 5 + j];
      loss += acc * acc;
    }
    return loss;
  };

  Rng coords(33);
  EXPECT_LT(ref::max_grad_err(forward, tile, 1e-3, 40, &coords), 1e-3);
}

TEST(Embed, TrainModeEngagesRunningStats) {
  ModelWeights w = cmc::init_weights(tiny_spec(), 41);
  Rng rng(42);
  std::vector<Tensor> tiles;
  for (int i = 0; i < 4; ++i)
    tiles.push_back(Tensor::from({2, 8, 8}, ref::random_values(rng, 2 * 8 * 8, 0.0, 1.0)));

  Tensor mean_before = w.bn.at("proj1/bn").running_mean.clone();
  auto [ft, zt] = cmc::embed_batch(w, 1, tiles, /*train=*/true);
  EXPECT_FALSE(same_data(mean_before, w.bn.at("proj1/bn").running_mean));

  auto [fe, ze] = cmc::embed_batch(w, 1, tiles, /*train=*/false);
  EXPECT_FALSE(same_data(zt, ze));  // batch stats vs running stats
}

// ---------------------------------------------------------------------------
// segmentation path

TEST(Segment, OutputShapeAndRange) {
  EncoderSpec s;
  s.in_channels = {3};
  ModelWeights w = cmc::init_weights(s, 51);
  Rng rng(52);
  Tensor tile = Tensor::from({3, 32, 32}, ref::random_values(rng, 3 * 32 * 32, 0.0, 1.0));
  Tensor prob = cmc::segment(w, tile);
  ASSERT_EQ(prob.shape(), (std::vector<int>{1, 32, 32}));
  double mean = 0.0;
  for (float v : prob.data()) {
    ASSERT_GT(v, 0.0f);
    ASSERT_LT(v, 1.0f);
    mean += v;
  }
  mean /= prob.numel();
  EXPECT_GT(mean, 0.2);
  EXPECT_LT(mean, 0.8);

  Tensor probe = cmc::segment(w, tile, /*probe=*/true);
  ASSERT_EQ(probe.shape(), (std::vector<int>{1, 32, 32}));
}

TEST(Segment, RejectsIndivisibleExtent) {
  EncoderSpec s;
  s.in_channels = {3};
  ModelWeights w = cmc::init_weights(s, 53);
  EXPECT_THROW(cmc::segment(w, Tensor::zeros({3, 30, 30})), cmc::GeometryError);
}

// ---------------------------------------------------------------------------
// transplant and checkpoint map

TEST(Transplant, FeaturePathIdenticalAfterTransplant) {
  EncoderSpec pre;
  pre.in_channels = {3, 3, 1};  // three-branch pretraining layout
  ModelWeights src = cmc::init_weights(pre, 61);

  EncoderSpec seg;
  seg.in_channels = {3};
  ModelWeights tgt = cmc::init_weights(seg, 62);
  std::map<std::string, Tensor> dec_before;
  for (const auto& [name, t] : tgt.params)
    if (name.rfind("dec/", 0) == 0) dec_before[name] = t.clone();

  ModelWeights out = cmc::transplant_encoder(src, 2, tgt);

  Rng rng(63);
  Tensor tile = Tensor::from({3, 8, 8}, ref::random_values(rng, 3 * 8 * 8, 0.0, 1.0));
  Tensor f_src = cmc::global_avg_pool(cmc::encoder_features(src, 2, tile));
  Tensor f_out = cmc::global_avg_pool(cmc::encoder_features(out, 1, tile));
  EXPECT_TRUE(same_data(f_src, f_out));

  for (const auto& [name, t] : dec_before)
    EXPECT_TRUE(same_data(t, out.param(name))) << name << " changed by transplant";
}

TEST(Transplant, FingerprintMismatchRejected) {
  EncoderSpec pre;
  pre.in_channels = {3, 1};
  ModelWeights src = cmc::init_weights(pre, 71);
  EncoderSpec seg;
  seg.in_channels = {3};
  ModelWeights tgt = cmc::init_weights(seg, 72);
  // branch 2 has 1 input channel; the target expects 3
  EXPECT_THROW(cmc::transplant_encoder(src, 2, tgt), cmc::DataError);

  EncoderSpec other = seg;
  other.widths = {8, 16};
  ModelWeights tgt2 = cmc::init_weights(other, 73);
  EXPECT_THROW(cmc::transplant_encoder(src, 1, tgt2), cmc::DataError);
}

TEST(CheckpointMap, RoundTripAndInventoryValidation) {
  EncoderSpec s = tiny_spec();
  ModelWeights w = cmc::init_weights(s, 81);
  w.bn.at("proj1/bn").running_mean.mutable_data()[0] = 0.25f;  // make buffers non-trivial

  auto flat = cmc::tensor_map(w);
  ModelWeights back = cmc::weights_from_map(s, flat);
  for (const auto& [name, t] : w.params) ASSERT_TRUE(same_data(t, back.param(name))) << name;
  EXPECT_EQ(back.bn.at("proj1/bn").running_mean.data()[0], 0.25f);
  for (const auto& [name, t] : back.params) ASSERT_TRUE(t.requires_grad()) << name;

  auto missing = flat;
  missing.erase("enc1/block0/w");
  EXPECT_THROW(cmc::weights_from_map(s, missing), cmc::DataError);

  auto extra = flat;
  extra["bogus"] = Tensor::zeros({1});
  EXPECT_THROW(cmc::weights_from_map(s, extra), cmc::DataError);

  auto badshape = flat;
  badshape["enc1/block0/b"] = Tensor::zeros({99});
  EXPECT_THROW(cmc::weights_from_map(s, badshape), cmc::DataError);
}

}  // namespace
