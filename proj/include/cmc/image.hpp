// Raster operations over [c x h x w] tensors, used for view construction and
// patch handling. These are plain data transforms: results are leaf tensors
// with no gradient history. Interpolation conventions: bilinear resize uses
// pixel-center mapping with edge clamping; rotation inverse-maps each output
// pixel and fills out-of-bounds samples with zero; blur uses replicate
// padding. Mask rasters should go through the nearest-neighbor variants and
// threshold_mask afterwards so they stay strictly binary.
#pragma once

#include <cmath>
#include <vector>

#include "cmc/tensor.hpp"

namespace cmc {

namespace detail {

inline void check_raster(const Tensor& x, const char* op) {
  if (!x.defined() || x.rank() != 3)
    throw ShapeError(std::string(op) + ": need raster [c x h x w]");
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace detail

inline Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
  detail::check_raster(x, "resize_bilinear");
  if (oh < 1 || ow < 1) throw GeometryError("resize_bilinear: non-positive target extent");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src.data() + static_cast<size_t>(ch) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      double fy = (oy + 0.5) * sy - 0.5;
      int y0 = static_cast<int>(std::floor(fy));
      double wy = fy - y0;
      int y0c = detail::clampi(y0, 0, h - 1), y1c = detail::clampi(y0 + 1, 0, h - 1);
      for (int ox = 0; ox < ow; ++ox) {
        double fx = (ox + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        double wx = fx - x0;
        int x0c = detail::clampi(x0, 0, w - 1), x1c = detail::clampi(x0 + 1, 0, w - 1);
        double v = (1 - wy) * ((1 - wx) * plane[y0c * w + x0c] + wx * plane[y0c * w + x1c]) +
                   wy * ((1 - wx) * plane[y1c * w + x0c] + wx * plane[y1c * w + x1c]);
        out[(static_cast<size_t>(ch) * oh + oy) * ow + ox] = static_cast<float>(v);
      }
    }
  }
  return Tensor::from({c, oh, ow}, std::move(out));
}

inline Tensor resize_nearest(const Tensor& x, int oh, int ow) {
  detail::check_raster(x, "resize_nearest");
  if (oh < 1 || ow < 1) throw GeometryError("resize_nearest: non-positive target extent");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src.data() + static_cast<size_t>(ch) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      int iy = detail::clampi(static_cast<int>((oy + 0.5) * h / oh), 0, h - 1);
      for (int ox = 0; ox < ow; ++ox) {
        int ix = detail::clampi(static_cast<int>((ox + 0.5) * w / ow), 0, w - 1);
        out[(static_cast<size_t>(ch) * oh + oy) * ow + ox] = plane[iy * w + ix];
      }
    }
  }
  return Tensor::from({c, oh, ow}, std::move(out));
}

inline Tensor crop(const Tensor& x, int y0, int x0, int size) {
  detail::check_raster(x, "crop");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (size < 1 || y0 < 0 || x0 < 0 || y0 + size > h || x0 + size > w)
    throw GeometryError("crop: window " + std::to_string(size) + " at (" + std::to_string(y0) +
                        "," + std::to_string(x0) + ") outside raster " + shape_str(x.shape()));
  std::vector<float> out(static_cast<size_t>(c) * size * size);
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < size; ++y)
      for (int xx = 0; xx < size; ++xx)
        out[(static_cast<size_t>(ch) * size + y) * size + xx] =
            src[(static_cast<size_t>(ch) * h + y0 + y) * w + x0 + xx];
  return Tensor::from({c, size, size}, std::move(out));
}

inline Tensor hflip(const Tensor& x) {
  detail::check_raster(x, "hflip");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::vector<float> out(static_cast<size_t>(c) * h * w);
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<size_t>(ch) * h + y) * w + xx] =
            src[(static_cast<size_t>(ch) * h + y) * w + (w - 1 - xx)];
  return Tensor::from({c, h, w}, std::move(out));
}

inline Tensor vflip(const Tensor& x) {
  detail::check_raster(x, "vflip");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  std::vector<float> out(static_cast<size_t>(c) * h * w);
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out[(static_cast<size_t>(ch) * h + y) * w + xx] =
            src[(static_cast<size_t>(ch) * h + (h - 1 - y)) * w + xx];
  return Tensor::from({c, h, w}, std::move(out));
}

namespace detail {

// Shared inverse-mapping rotation about the raster center. Out-of-bounds
// samples are zero.
template <typename SampleFn>
Tensor rotate_impl(const Tensor& x, double deg, SampleFn sample) {
  check_raster(x, "rotate");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const double rad = deg * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  std::vector<float> out(static_cast<size_t>(c) * h * w);
  auto src = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src.data() + static_cast<size_t>(ch) * h * w;
    for (int oy = 0; oy < h; ++oy) {
      for (int ox = 0; ox < w; ++ox) {
        double dx = ox - cx, dy = oy - cy;
        double sxf = cs * dx + sn * dy + cx;
        double syf = -sn * dx + cs * dy + cy;
        out[(static_cast<size_t>(ch) * h + oy) * w + ox] = sample(plane, h, w, syf, sxf);
      }
    }
  }
  return Tensor::from({c, h, w}, std::move(out));
}

inline float sample_bilinear_zero(const float* plane, int h, int w, double sy, double sx) {
  int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  double wy = sy - y0, wx = sx - x0;
  auto px = [&](int y, int xx) -> double {
    if (y < 0 || y >= h || xx < 0 || xx >= w) return 0.0;
    return plane[y * w + xx];
  };
  return static_cast<float>((1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                            wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1)));
}

inline float sample_nearest_zero(const float* plane, int h, int w, double sy, double sx) {
  int y = static_cast<int>(std::lround(sy)), xx = static_cast<int>(std::lround(sx));
  if (y < 0 || y >= h || xx < 0 || xx >= w) return 0.0f;
  return plane[y * w + xx];
}

}  // namespace detail

inline Tensor rotate_bilinear(const Tensor& x, double deg) {
  return detail::rotate_impl(x, deg, detail::sample_bilinear_zero);
}

inline Tensor rotate_nearest(const Tensor& x, double deg) {
  return detail::rotate_impl(x, deg, detail::sample_nearest_zero);
}

// Separable Gaussian blur, odd kernel, replicate padding at the borders.
inline Tensor gaussian_blur(const Tensor& x, int k, double sigma) {
  detail::check_raster(x, "gaussian_blur");
  if (k < 1 || k % 2 == 0) throw GeometryError("gaussian_blur: kernel must be odd, got " +
                                               std::to_string(k));
  if (!(sigma > 0.0)) throw DomainError("gaussian_blur: sigma must be positive");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const int r = k / 2;
  std::vector<double> kern(static_cast<size_t>(k));
  double norm = 0.0;
  for (int i = 0; i < k; ++i) {
    double d = i - r;
    kern[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    norm += kern[static_cast<size_t>(i)];
  }
  for (auto& v : kern) v /= norm;

  auto src = x.data();
  std::vector<float> tmp(static_cast<size_t>(c) * h * w), out(static_cast<size_t>(c) * h * w);
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = src.data() + static_cast<size_t>(ch) * h * w;
    float* tp = tmp.data() + static_cast<size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i)
          acc += kern[static_cast<size_t>(i)] * plane[y * w + detail::clampi(xx + i - r, 0, w - 1)];
        tp[y * w + xx] = static_cast<float>(acc);
      }
    float* op = out.data() + static_cast<size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i)
          acc += kern[static_cast<size_t>(i)] * tp[detail::clampi(y + i - r, 0, h - 1) * w + xx];
        op[y * w + xx] = static_cast<float>(acc);
      }
  }
  return Tensor::from({c, h, w}, std::move(out));
}

// Strict binarization used to keep mask rasters in {0,1} after resampling.
inline Tensor threshold_mask(const Tensor& x) {
  detail::check_raster(x, "threshold_mask");
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.5f ? 1.0f : 0.0f;
  return Tensor::from(x.shape(), std::move(out));
}

}  // namespace cmc
