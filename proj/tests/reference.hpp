// Test-only oracles: independent double-precision forward implementations and
// central finite differences. Nothing here shares code with the library's
// compute paths; gradient checks compare the engine's reverse-mode results
// against derivatives of these references.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cmc/rng.hpp"
#include "cmc/tensor.hpp"

namespace ref {

using Vec = std::vector<double>;
using Fn = std::function<double(const Vec&)>;

inline Vec to_f64(std::span<const float> v) { return Vec(v.begin(), v.end()); }

inline Vec matmul(const Vec& a, int m, int k, const Vec& b, int n) {
  Vec c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < k; ++t)
      for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + t] * b[t * n + j];
  return c;
}

inline Vec conv2d(const Vec& x, int ci, int h, int w, const Vec& ker, int co, int k, int stride,
                  int pad) {
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  Vec out(static_cast<size_t>(co) * oh * ow, 0.0);
  for (int oc = 0; oc < co; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int iy = oy * stride - pad + ky;
              int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[(c * h + iy) * w + ix] * ker[((oc * ci + c) * k + ky) * k + kx];
            }
        out[(oc * oh + oy) * ow + ox] = acc;
      }
  return out;
}

inline Vec batchnorm_train(const Vec& x, int b, int d, const Vec& gamma, const Vec& beta,
                           double eps) {
  Vec out(x.size());
  for (int j = 0; j < d; ++j) {
    double m = 0.0;
    for (int i = 0; i < b; ++i) m += x[i * d + j];
    m /= b;
    double v = 0.0;
    for (int i = 0; i < b; ++i) v += (x[i * d + j] - m) * (x[i * d + j] - m);
    v /= b;
    double inv = 1.0 / std::sqrt(v + eps);
    for (int i = 0; i < b; ++i) out[i * d + j] = gamma[j] * (x[i * d + j] - m) * inv + beta[j];
  }
  return out;
}

inline Vec batchnorm_eval(const Vec& x, int b, int d, const Vec& gamma, const Vec& beta,
                          const Vec& rmean, const Vec& rvar, double eps) {
  Vec out(x.size());
  for (int j = 0; j < d; ++j) {
    double inv = 1.0 / std::sqrt(rvar[j] + eps);
    for (int i = 0; i < b; ++i) out[i * d + j] = gamma[j] * (x[i * d + j] - rmean[j]) * inv + beta[j];
  }
  return out;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Central finite difference of f along coordinate i.
inline double fd(const Fn& f, Vec x, size_t i, double h = 1e-3) {
  double x0 = x[i];
  x[i] = x0 + h;
  double fp = f(x);
  x[i] = x0 - h;
  double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

// |a-b| relative to the larger magnitude, floored so near-zero gradients are
// compared absolutely at the 1e-2 scale.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-2});
}

// Random values in [-2,2] avoiding a margin around given kink locations.
inline std::vector<float> random_values(cmc::Rng& rng, int n, double lo = -2.0, double hi = 2.0,
                                        double kink_margin = 0.0) {
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) {
    double d;
    do {
      d = rng.uniform(lo, hi);
    } while (kink_margin > 0.0 && std::abs(d) < kink_margin);
    x = static_cast<float>(d);
  }
  return v;
}

// Checks the engine gradient of `input` against finite differences of the
// scalar reference `f` evaluated at the input's current values. Returns the
// max relative error over all (or up to `max_coords`) coordinates.
inline double max_grad_err(const Fn& f, const cmc::Tensor& input, double h = 1e-3,
                           int max_coords = -1, cmc::Rng* coord_rng = nullptr) {
  Vec x = to_f64(input.data());
  auto g = input.grad();
  double worst = 0.0;
  int n = static_cast<int>(x.size());
  if (max_coords <= 0 || max_coords >= n) {
    for (int i = 0; i < n; ++i) worst = std::max(worst, rel_err(g[i], fd(f, x, i, h)));
  } else {
    for (int c = 0; c < max_coords; ++c) {
      int i = coord_rng->uniform_int(n);
      worst = std::max(worst, rel_err(g[i], fd(f, x, i, h)));
    }
  }
  return worst;
}

}  // namespace ref
