// Differentiable ops over Tensor. Forward values are float32; dot products,
// reductions and statistics accumulate in float64 with a fixed serial order.
// Each op validates its inputs, computes the result, and registers a backward
// closure that scatters into its parents' gradient buffers.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "cmc/tensor.hpp"

namespace cmc {

namespace detail {

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

enum class BinOp { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
  if (!same_shape(a, b) && !a_scalar && !b_scalar) {
    throw ShapeError(std::string(name) + ": operand shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + " (only scalar broadcast supported)");
  }
  const auto& big = (a_scalar && !b_scalar) ? b : a;
  int n = big.numel();
  std::vector<float> out(static_cast<size_t>(n));
  auto ai = a.impl(), bi = b.impl();
  const float* ap = ai->data.data();
  const float* bp = bi->data.data();
  for (int i = 0; i < n; ++i) {
    float av = a_scalar ? ap[0] : ap[i];
    float bv = b_scalar ? bp[0] : bp[i];
    switch (op) {
      case BinOp::Add: out[i] = av + bv; break;
      case BinOp::Sub: out[i] = av - bv; break;
      case BinOp::Mul: out[i] = av * bv; break;
    }
  }
  return make_result(
      big.shape(), std::move(out), name, {a, b},
      [ai, bi, a_scalar, b_scalar, op, n](TensorImpl& self) {
        const float* g = self.grad.data();
        const float* ap2 = ai->data.data();
        const float* bp2 = bi->data.data();
        if (ai->requires_grad) {
          if (a_scalar && n > 1) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
              double gi = g[i];
              if (op == BinOp::Mul) gi *= b_scalar ? bp2[0] : bp2[i];
              acc += gi;
            }
            ai->grad[0] += static_cast<float>(acc);
          } else {
            for (int i = 0; i < n; ++i) {
              float gi = g[i];
              if (op == BinOp::Mul) gi *= b_scalar ? bp2[0] : bp2[i];
              ai->grad[i] += gi;
            }
          }
        }
        if (bi->requires_grad) {
          if (b_scalar && n > 1) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
              double gi = g[i];
              if (op == BinOp::Mul)
                gi *= a_scalar ? ap2[0] : ap2[i];
              else if (op == BinOp::Sub)
                gi = -gi;
              acc += gi;
            }
            bi->grad[0] += static_cast<float>(acc);
          } else {
            for (int i = 0; i < n; ++i) {
              float gi = g[i];
              if (op == BinOp::Mul)
                gi *= a_scalar ? ap2[0] : ap2[i];
              else if (op == BinOp::Sub)
                gi = -gi;
              bi->grad[i] += gi;
            }
          }
        }
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinOp::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinOp::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, detail::BinOp::Mul, "mul");
}

inline Tensor scale(const Tensor& x, float c) {
  auto xi = x.impl();
  int n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = xi->data[i] * c;
  return detail::make_result(x.shape(), std::move(out), "scale", {x},
                             [xi, c, n](TensorImpl& self) {
                               for (int i = 0; i < n; ++i) xi->grad[i] += c * self.grad[i];
                             });
}

inline Tensor exp(const Tensor& x) {
  auto xi = x.impl();
  int n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = std::exp(xi->data[i]);
  return detail::make_result(x.shape(), std::move(out), "exp", {x}, [xi, n](TensorImpl& self) {
    for (int i = 0; i < n; ++i) xi->grad[i] += self.data[i] * self.grad[i];
  });
}

inline Tensor log(const Tensor& x) {
  auto xi = x.impl();
  int n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!(xi->data[i] > 0.0f))
      throw DomainError("log of non-positive value " + std::to_string(xi->data[i]));
    out[i] = std::log(xi->data[i]);
  }
  return detail::make_result(x.shape(), std::move(out), "log", {x}, [xi, n](TensorImpl& self) {
    for (int i = 0; i < n; ++i) xi->grad[i] += self.grad[i] / xi->data[i];
  });
}

inline Tensor relu(const Tensor& x) {
  auto xi = x.impl();
  int n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = xi->data[i] > 0.0f ? xi->data[i] : 0.0f;
  return detail::make_result(x.shape(), std::move(out), "relu", {x}, [xi, n](TensorImpl& self) {
    for (int i = 0; i < n; ++i)
      if (xi->data[i] > 0.0f) xi->grad[i] += self.grad[i];
  });
}

inline float stable_sigmoid(float v) {
  if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
  float e = std::exp(v);
  return e / (1.0f + e);
}

inline Tensor sigmoid(const Tensor& x) {
  auto xi = x.impl();
  int n = x.numel();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = stable_sigmoid(xi->data[i]);
  return detail::make_result(x.shape(), std::move(out), "sigmoid", {x},
                             [xi, n](TensorImpl& self) {
                               for (int i = 0; i < n; ++i) {
                                 float y = self.data[i];
                                 xi->grad[i] += y * (1.0f - y) * self.grad[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
  auto ai = a.impl(), bi = b.impl();
  std::vector<float> out(static_cast<size_t>(m) * n);
  const float* ap = ai->data.data();
  const float* bp = bi->data.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += static_cast<double>(ap[i * k + t]) * bp[t * n + j];
      out[static_cast<size_t>(i) * n + j] = static_cast<float>(acc);
    }
  }
  return detail::make_result(
      {m, n}, std::move(out), "matmul", {a, b}, [ai, bi, m, k, n](TensorImpl& self) {
        const float* g = self.grad.data();
        if (ai->requires_grad) {
          const float* bp2 = bi->data.data();
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j)
                acc += static_cast<double>(g[i * n + j]) * bp2[t * n + j];
              ai->grad[static_cast<size_t>(i) * k + t] += static_cast<float>(acc);
            }
        }
        if (bi->requires_grad) {
          const float* ap2 = ai->data.data();
          for (int t = 0; t < k; ++t)
            for (int j = 0; j < n; ++j) {
              double acc = 0.0;
              for (int i = 0; i < m; ++i)
                acc += static_cast<double>(ap2[i * k + t]) * g[i * n + j];
              bi->grad[static_cast<size_t>(t) * n + j] += static_cast<float>(acc);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

namespace detail {

// Decompose shape into [outer, n, inner] around the reduced axis.
struct AxisSplit {
  int outer, n, inner;
  std::vector<int> out_shape;
};

inline AxisSplit axis_split(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw DomainError("reduction axis " + std::to_string(axis) + " invalid for " +
                      shape_str(x.shape()));
  AxisSplit s{1, x.extent(axis), 1, {}};
  for (int i = 0; i < axis; ++i) s.outer *= x.extent(i);
  for (int i = axis + 1; i < x.rank(); ++i) s.inner *= x.extent(i);
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) s.out_shape.push_back(x.extent(i));
  if (s.out_shape.empty()) s.out_shape = {1};
  return s;
}

}  // namespace detail

inline Tensor reduce_sum(const Tensor& x, int axis) {
  auto sp = detail::axis_split(x, axis);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(sp.outer) * sp.inner);
  const float* p = xi->data.data();
  for (int o = 0; o < sp.outer; ++o)
    for (int in = 0; in < sp.inner; ++in) {
      double acc = 0.0;
      for (int t = 0; t < sp.n; ++t)
        acc += p[(static_cast<size_t>(o) * sp.n + t) * sp.inner + in];
      out[static_cast<size_t>(o) * sp.inner + in] = static_cast<float>(acc);
    }
  return detail::make_result(sp.out_shape, std::move(out), "sum", {x},
                             [xi, sp](TensorImpl& self) {
                               for (int o = 0; o < sp.outer; ++o)
                                 for (int t = 0; t < sp.n; ++t)
                                   for (int in = 0; in < sp.inner; ++in)
                                     xi->grad[(static_cast<size_t>(o) * sp.n + t) * sp.inner + in] +=
                                         self.grad[static_cast<size_t>(o) * sp.inner + in];
                             });
}

inline Tensor reduce_mean(const Tensor& x, int axis) {
  auto sp = detail::axis_split(x, axis);
  return scale(reduce_sum(x, axis), 1.0f / static_cast<float>(sp.n));
}

// max-subtracted logsumexp along an axis
inline Tensor logsumexp(const Tensor& x, int axis) {
  auto sp = detail::axis_split(x, axis);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(sp.outer) * sp.inner);
  const float* p = xi->data.data();
  for (int o = 0; o < sp.outer; ++o)
    for (int in = 0; in < sp.inner; ++in) {
      float mx = -std::numeric_limits<float>::infinity();
      for (int t = 0; t < sp.n; ++t)
        mx = std::max(mx, p[(static_cast<size_t>(o) * sp.n + t) * sp.inner + in]);
      double acc = 0.0;
      for (int t = 0; t < sp.n; ++t)
        acc += std::exp(static_cast<double>(p[(static_cast<size_t>(o) * sp.n + t) * sp.inner + in]) - mx);
      out[static_cast<size_t>(o) * sp.inner + in] = static_cast<float>(mx + std::log(acc));
    }
  return detail::make_result(
      sp.out_shape, std::move(out), "logsumexp", {x}, [xi, sp](TensorImpl& self) {
        const float* p2 = xi->data.data();
        for (int o = 0; o < sp.outer; ++o)
          for (int in = 0; in < sp.inner; ++in) {
            size_t oi = static_cast<size_t>(o) * sp.inner + in;
            float lse = self.data[oi], g = self.grad[oi];
            for (int t = 0; t < sp.n; ++t) {
              size_t idx = (static_cast<size_t>(o) * sp.n + t) * sp.inner + in;
              xi->grad[idx] += g * std::exp(p2[idx] - lse);
            }
          }
      });
}

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xi = x.impl();
  std::vector<float> out(xi->data);
  int n = x.numel();
  return detail::make_result(std::move(shape), std::move(out), "reshape", {x},
                             [xi, n](TensorImpl& self) {
                               for (int i = 0; i < n; ++i) xi->grad[i] += self.grad[i];
                             });
}

inline Tensor reduce_sum(const Tensor& x) { return reduce_sum(reshape(x, {x.numel()}), 0); }
inline Tensor reduce_mean(const Tensor& x) { return reduce_mean(reshape(x, {x.numel()}), 0); }
inline Tensor logsumexp(const Tensor& x) { return logsumexp(reshape(x, {x.numel()}), 0); }

// ---------------------------------------------------------------------------
// conv2d: single image [c_in x h x w], kernels [c_out x c_in x k x k],
// cross-correlation convention, zero padding.

inline Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int pad) {
  if (x.rank() != 3 || kernels.rank() != 4)
    throw ShapeError("conv2d: need x[c,h,w] and kernels[co,ci,k,k], got " +
                     shape_str(x.shape()) + " and " + shape_str(kernels.shape()));
  const int ci = x.extent(0), h = x.extent(1), w = x.extent(2);
  const int co = kernels.extent(0), kci = kernels.extent(1), kh = kernels.extent(2),
            kw = kernels.extent(3);
  if (kci != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) + " vs kernel channels " +
                     std::to_string(kci));
  if (kh != kw || kh % 2 == 0) throw GeometryError("conv2d: kernel must be square and odd");
  if (stride < 1 || pad < 0) throw GeometryError("conv2d: invalid stride/pad");
  const int hn = h + 2 * pad - kh, wn = w + 2 * pad - kw;
  if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0)
    throw GeometryError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                        " kernel " + std::to_string(kh) + " stride " + std::to_string(stride) +
                        " pad " + std::to_string(pad));
  const int oh = hn / stride + 1, ow = wn / stride + 1;

  auto xi = x.impl(), ki = kernels.impl();
  std::vector<float> out(static_cast<size_t>(co) * oh * ow);
  const float* xp = xi->data.data();
  const float* kp = ki->data.data();
  for (int oc = 0; oc < co; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      const int iy0 = oy * stride - pad;
      for (int ox = 0; ox < ow; ++ox) {
        const int ix0 = ox * stride - pad;
        double acc = 0.0;
        for (int c = 0; c < ci; ++c) {
          const float* xc = xp + static_cast<size_t>(c) * h * w;
          const float* kc = kp + ((static_cast<size_t>(oc) * ci + c) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const float* xrow = xc + static_cast<size_t>(iy) * w;
            const float* krow = kc + static_cast<size_t>(ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= w) continue;
              acc += static_cast<double>(xrow[ix]) * krow[kx];
            }
          }
        }
        out[(static_cast<size_t>(oc) * oh + oy) * ow + ox] = static_cast<float>(acc);
      }
    }
  }
  return detail::make_result(
      {co, oh, ow}, std::move(out), "conv2d", {x, kernels},
      [xi, ki, ci, h, w, co, kh, kw, stride, pad, oh, ow](TensorImpl& self) {
        const float* g = self.grad.data();
        const float* xp2 = xi->data.data();
        const float* kp2 = ki->data.data();
        for (int oc = 0; oc < co; ++oc) {
          for (int oy = 0; oy < oh; ++oy) {
            const int iy0 = oy * stride - pad;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix0 = ox * stride - pad;
              const float go = g[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
              if (go == 0.0f) continue;
              for (int c = 0; c < ci; ++c) {
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= w) continue;
                    const size_t xoff = (static_cast<size_t>(c) * h + iy) * w + ix;
                    const size_t koff = ((static_cast<size_t>(oc) * ci + c) * kh + ky) * kw + kx;
                    if (xi->requires_grad) xi->grad[xoff] += go * kp2[koff];
                    if (ki->requires_grad) ki->grad[koff] += go * xp2[xoff];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batch normalization over [b x d]

struct BatchNormStats {
  Tensor running_mean;  // [d]
  Tensor running_var;   // [d]
};

inline constexpr float kBatchNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

// Train mode normalizes by batch statistics (biased variance) and updates the
// running buffers in place; eval mode normalizes by the running buffers.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, bool train,
                        BatchNormStats& stats) {
  if (x.rank() != 2) throw ShapeError("batchnorm: need [b,d], got " + shape_str(x.shape()));
  const int b = x.extent(0), d = x.extent(1);
  if (gamma.numel() != d || beta.numel() != d || stats.running_mean.numel() != d ||
      stats.running_var.numel() != d)
    throw ShapeError("batchnorm: parameter extent mismatch for d=" + std::to_string(d));
  if (train && b < 2)
    throw DomainError("batchnorm: degenerate batch of " + std::to_string(b) + " in train mode");

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  std::vector<float> mean(static_cast<size_t>(d)), var(static_cast<size_t>(d));
  if (train) {
    for (int j = 0; j < d; ++j) {
      double m = 0.0;
      for (int i = 0; i < b; ++i) m += xi->data[static_cast<size_t>(i) * d + j];
      m /= b;
      double v = 0.0;
      for (int i = 0; i < b; ++i) {
        double c = xi->data[static_cast<size_t>(i) * d + j] - m;
        v += c * c;
      }
      v /= b;
      mean[j] = static_cast<float>(m);
      var[j] = static_cast<float>(v);
    }
    auto& rm = stats.running_mean.mutable_data();
    auto& rv = stats.running_var.mutable_data();
    for (int j = 0; j < d; ++j) {
      rm[j] = (1.0f - kBatchNormMomentum) * rm[j] + kBatchNormMomentum * mean[j];
      rv[j] = (1.0f - kBatchNormMomentum) * rv[j] + kBatchNormMomentum * var[j];
    }
  } else {
    for (int j = 0; j < d; ++j) {
      mean[j] = stats.running_mean.data()[j];
      var[j] = stats.running_var.data()[j];
    }
  }

  std::vector<float> out(static_cast<size_t>(b) * d);
  std::vector<float> inv_sigma(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) inv_sigma[j] = 1.0f / std::sqrt(var[j] + kBatchNormEps);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j) {
      size_t idx = static_cast<size_t>(i) * d + j;
      float xhat = (xi->data[idx] - mean[j]) * inv_sigma[j];
      out[idx] = gi->data[j] * xhat + bi->data[j];
    }

  return detail::make_result(
      {b, d}, std::move(out), "batchnorm", {x, gamma, beta},
      [xi, gi, bi, b, d, mean, inv_sigma, train](TensorImpl& self) {
        const float* g = self.grad.data();
        for (int j = 0; j < d; ++j) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int i = 0; i < b; ++i) {
            size_t idx = static_cast<size_t>(i) * d + j;
            double xhat = (xi->data[idx] - mean[j]) * inv_sigma[j];
            sum_g += g[idx];
            sum_gx += g[idx] * xhat;
          }
          if (gi->requires_grad) gi->grad[j] += static_cast<float>(sum_gx);
          if (bi->requires_grad) bi->grad[j] += static_cast<float>(sum_g);
          if (!xi->requires_grad) continue;
          if (train) {
            for (int i = 0; i < b; ++i) {
              size_t idx = static_cast<size_t>(i) * d + j;
              double xhat = (xi->data[idx] - mean[j]) * inv_sigma[j];
              double dxhat = static_cast<double>(g[idx]) * gi->data[j];
              xi->grad[idx] += static_cast<float>(
                  inv_sigma[j] * (dxhat - (sum_g * gi->data[j]) / b - xhat * (sum_gx * gi->data[j]) / b));
            }
          } else {
            for (int i = 0; i < b; ++i) {
              size_t idx = static_cast<size_t>(i) * d + j;
              xi->grad[idx] += g[idx] * gi->data[j] * inv_sigma[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// structural ops

inline Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d: need rank 2, got " + shape_str(x.shape()));
  const int m = x.extent(0), n = x.extent(1);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = xi->data[static_cast<size_t>(i) * n + j];
  return detail::make_result({n, m}, std::move(out), "transpose2d", {x},
                             [xi, m, n](TensorImpl& self) {
                               for (int i = 0; i < m; ++i)
                                 for (int j = 0; j < n; ++j)
                                   xi->grad[static_cast<size_t>(i) * n + j] +=
                                       self.grad[static_cast<size_t>(j) * m + i];
                             });
}

// Rows scaled to unit L2 norm; a (near-)zero row is a degenerate embedding.
inline Tensor row_normalize(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("row_normalize: need rank 2, got " + shape_str(x.shape()));
  const int m = x.extent(0), n = x.extent(1);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(m) * n);
  std::vector<float> norms(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      double v = xi->data[static_cast<size_t>(i) * n + j];
      s += v * v;
    }
    double nr = std::sqrt(s);
    if (nr < 1e-12)
      throw DomainError("degenerate embedding: zero-norm row " + std::to_string(i));
    norms[i] = static_cast<float>(nr);
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(i) * n + j] = static_cast<float>(xi->data[static_cast<size_t>(i) * n + j] / nr);
  }
  return detail::make_result(
      {m, n}, std::move(out), "row_normalize", {x}, [xi, m, n, norms](TensorImpl& self) {
        // y = x/r  =>  dx = g/r - y * (y . g) / r
        for (int i = 0; i < m; ++i) {
          double dot = 0.0;
          for (int j = 0; j < n; ++j) {
            size_t idx = static_cast<size_t>(i) * n + j;
            dot += static_cast<double>(self.data[idx]) * self.grad[idx];
          }
          for (int j = 0; j < n; ++j) {
            size_t idx = static_cast<size_t>(i) * n + j;
            xi->grad[idx] += static_cast<float>((self.grad[idx] - self.data[idx] * dot) / norms[i]);
          }
        }
      });
}

inline Tensor diag2d(const Tensor& x) {
  if (x.rank() != 2 || x.extent(0) != x.extent(1))
    throw ShapeError("diag2d: need square matrix, got " + shape_str(x.shape()));
  const int n = x.extent(0);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = xi->data[static_cast<size_t>(i) * n + i];
  return detail::make_result({n}, std::move(out), "diag2d", {x}, [xi, n](TensorImpl& self) {
    for (int i = 0; i < n; ++i) xi->grad[static_cast<size_t>(i) * n + i] += self.grad[i];
  });
}

// Row i of the result holds x[i][j] for all j != i, ascending j.
inline Tensor drop_diagonal(const Tensor& x) {
  if (x.rank() != 2 || x.extent(0) != x.extent(1))
    throw ShapeError("drop_diagonal: need square matrix, got " + shape_str(x.shape()));
  const int n = x.extent(0);
  if (n < 2) throw ShapeError("drop_diagonal: need n >= 2");
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(n) * (n - 1));
  for (int i = 0; i < n; ++i) {
    int c = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      out[static_cast<size_t>(i) * (n - 1) + c++] = xi->data[static_cast<size_t>(i) * n + j];
    }
  }
  return detail::make_result({n, n - 1}, std::move(out), "drop_diagonal", {x},
                             [xi, n](TensorImpl& self) {
                               for (int i = 0; i < n; ++i) {
                                 int c = 0;
                                 for (int j = 0; j < n; ++j) {
                                   if (j == i) continue;
                                   xi->grad[static_cast<size_t>(i) * n + j] +=
                                       self.grad[static_cast<size_t>(i) * (n - 1) + c++];
                                 }
                               }
                             });
}

// x[B x V x D] -> plane v as [B x D]
inline Tensor select_plane(const Tensor& x, int v) {
  if (x.rank() != 3) throw ShapeError("select_plane: need rank 3, got " + shape_str(x.shape()));
  const int B = x.extent(0), V = x.extent(1), D = x.extent(2);
  if (v < 0 || v >= V) throw DomainError("select_plane: view index " + std::to_string(v));
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(B) * D);
  for (int b = 0; b < B; ++b)
    std::memcpy(&out[static_cast<size_t>(b) * D],
                &xi->data[(static_cast<size_t>(b) * V + v) * D], sizeof(float) * D);
  return detail::make_result({B, D}, std::move(out), "select_plane", {x},
                             [xi, B, V, D, v](TensorImpl& self) {
                               for (int b = 0; b < B; ++b)
                                 for (int j = 0; j < D; ++j)
                                   xi->grad[(static_cast<size_t>(b) * V + v) * D + j] +=
                                       self.grad[static_cast<size_t>(b) * D + j];
                             });
}

// Stack per-view [B x D] matrices into [B x V x D].
inline Tensor stack_planes(const std::vector<Tensor>& planes) {
  if (planes.empty()) throw ShapeError("stack_planes: empty input");
  const int B = planes[0].extent(0), D = planes[0].extent(1);
  const int V = static_cast<int>(planes.size());
  for (const auto& p : planes)
    if (p.rank() != 2 || p.extent(0) != B || p.extent(1) != D)
      throw ShapeError("stack_planes: inconsistent plane shape " + shape_str(p.shape()));
  std::vector<float> out(static_cast<size_t>(B) * V * D);
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : planes) impls.push_back(p.impl());
  for (int v = 0; v < V; ++v)
    for (int b = 0; b < B; ++b)
      std::memcpy(&out[(static_cast<size_t>(b) * V + v) * D],
                  &impls[static_cast<size_t>(v)]->data[static_cast<size_t>(b) * D],
                  sizeof(float) * D);
  return detail::make_result({B, V, D}, std::move(out), "stack_planes", planes,
                             [impls, B, V, D](TensorImpl& self) {
                               for (int v = 0; v < V; ++v) {
                                 auto& p = impls[static_cast<size_t>(v)];
                                 if (!p->requires_grad) continue;
                                 for (int b = 0; b < B; ++b)
                                   for (int j = 0; j < D; ++j)
                                     p->grad[static_cast<size_t>(b) * D + j] +=
                                         self.grad[(static_cast<size_t>(b) * V + v) * D + j];
                               }
                             });
}

// Stack rank-1 tensors of equal extent into [n x d].
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  const int d = rows[0].numel();
  const int n = static_cast<int>(rows.size());
  std::vector<float> out(static_cast<size_t>(n) * d);
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& r : rows) {
    if (r.numel() != d) throw ShapeError("stack_rows: inconsistent row extents");
    impls.push_back(r.impl());
  }
  for (int i = 0; i < n; ++i)
    std::memcpy(&out[static_cast<size_t>(i) * d], impls[static_cast<size_t>(i)]->data.data(),
                sizeof(float) * d);
  return detail::make_result({n, d}, std::move(out), "stack_rows", rows,
                             [impls, n, d](TensorImpl& self) {
                               for (int i = 0; i < n; ++i) {
                                 auto& p = impls[static_cast<size_t>(i)];
                                 if (!p->requires_grad) continue;
                                 for (int j = 0; j < d; ++j)
                                   p->grad[j] += self.grad[static_cast<size_t>(i) * d + j];
                               }
                             });
}

// Rows start, start+stride, ... of x[R x D].
inline Tensor take_rows_strided(const Tensor& x, int start, int stride) {
  if (x.rank() != 2) throw ShapeError("take_rows_strided: need rank 2");
  const int R = x.extent(0), D = x.extent(1);
  if (start < 0 || start >= stride || stride < 1 || R % stride != 0)
    throw DomainError("take_rows_strided: invalid start/stride for R=" + std::to_string(R));
  const int n = R / stride;
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(n) * D);
  for (int i = 0; i < n; ++i)
    std::memcpy(&out[static_cast<size_t>(i) * D],
                &xi->data[static_cast<size_t>(start + i * stride) * D], sizeof(float) * D);
  return detail::make_result({n, D}, std::move(out), "take_rows_strided", {x},
                             [xi, n, D, start, stride](TensorImpl& self) {
                               for (int i = 0; i < n; ++i)
                                 for (int j = 0; j < D; ++j)
                                   xi->grad[static_cast<size_t>(start + i * stride) * D + j] +=
                                       self.grad[static_cast<size_t>(i) * D + j];
                             });
}

// y[i] = x[i][idx[i]]
inline Tensor gather_cols(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw ShapeError("gather_cols: need rank 2");
  const int n = x.extent(0), m = x.extent(1);
  if (static_cast<int>(idx.size()) != n) throw ShapeError("gather_cols: index length mismatch");
  for (int j : idx)
    if (j < 0 || j >= m) throw DomainError("gather_cols: column index out of range");
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = xi->data[static_cast<size_t>(i) * m + idx[i]];
  return detail::make_result({n}, std::move(out), "gather_cols", {x},
                             [xi, n, m, idx](TensorImpl& self) {
                               for (int i = 0; i < n; ++i)
                                 xi->grad[static_cast<size_t>(i) * m + idx[i]] += self.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// network building blocks

inline Tensor bias_add_channel(const Tensor& x, const Tensor& b) {
  if (x.rank() != 3 || b.numel() != x.extent(0))
    throw ShapeError("bias_add_channel: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const int c = x.extent(0), hw = x.extent(1) * x.extent(2);
  auto xi = x.impl(), bi = b.impl();
  std::vector<float> out(xi->data);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) out[static_cast<size_t>(ch) * hw + i] += bi->data[ch];
  return detail::make_result(x.shape(), std::move(out), "bias_add_channel", {x, b},
                             [xi, bi, c, hw](TensorImpl& self) {
                               for (int ch = 0; ch < c; ++ch) {
                                 double acc = 0.0;
                                 for (int i = 0; i < hw; ++i) {
                                   float g = self.grad[static_cast<size_t>(ch) * hw + i];
                                   if (xi->requires_grad)
                                     xi->grad[static_cast<size_t>(ch) * hw + i] += g;
                                   acc += g;
                                 }
                                 if (bi->requires_grad) bi->grad[ch] += static_cast<float>(acc);
                               }
                             });
}

inline Tensor bias_add_row(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.numel() != x.extent(1))
    throw ShapeError("bias_add_row: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const int n = x.extent(0), d = x.extent(1);
  auto xi = x.impl(), bi = b.impl();
  std::vector<float> out(xi->data);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += bi->data[j];
  return detail::make_result(x.shape(), std::move(out), "bias_add_row", {x, b},
                             [xi, bi, n, d](TensorImpl& self) {
                               for (int j = 0; j < d; ++j) {
                                 double acc = 0.0;
                                 for (int i = 0; i < n; ++i) {
                                   float g = self.grad[static_cast<size_t>(i) * d + j];
                                   if (xi->requires_grad)
                                     xi->grad[static_cast<size_t>(i) * d + j] += g;
                                   acc += g;
                                 }
                                 if (bi->requires_grad) bi->grad[j] += static_cast<float>(acc);
                               }
                             });
}

// 2x2 average pooling with stride 2; the downsampling step of encoder blocks.
inline Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("avg_pool2: need [c,h,w]");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw GeometryError("avg_pool2: extent " + shape_str(x.shape()) + " not divisible by 2");
  const int oh = h / 2, ow = w / 2;
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const float* p = &xi->data[(static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xx];
        out[(static_cast<size_t>(ch) * oh + y) * ow + xx] =
            0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  return detail::make_result({c, oh, ow}, std::move(out), "avg_pool2", {x},
                             [xi, c, h, w, oh, ow](TensorImpl& self) {
                               for (int ch = 0; ch < c; ++ch)
                                 for (int y = 0; y < oh; ++y)
                                   for (int xx = 0; xx < ow; ++xx) {
                                     float g = 0.25f *
                                               self.grad[(static_cast<size_t>(ch) * oh + y) * ow + xx];
                                     float* p = &xi->grad[(static_cast<size_t>(ch) * h + 2 * y) * w +
                                                          2 * xx];
                                     p[0] += g;
                                     p[1] += g;
                                     p[w] += g;
                                     p[w + 1] += g;
                                   }
                             });
}

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool: need [c,h,w]");
  const int c = x.extent(0), hw = x.extent(1) * x.extent(2);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += xi->data[static_cast<size_t>(ch) * hw + i];
    out[ch] = static_cast<float>(acc / hw);
  }
  return detail::make_result({c}, std::move(out), "global_avg_pool", {x},
                             [xi, c, hw](TensorImpl& self) {
                               for (int ch = 0; ch < c; ++ch) {
                                 float g = self.grad[ch] / static_cast<float>(hw);
                                 for (int i = 0; i < hw; ++i)
                                   xi->grad[static_cast<size_t>(ch) * hw + i] += g;
                               }
                             });
}

inline Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest2: need [c,h,w]");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  auto xi = x.impl();
  std::vector<float> out(static_cast<size_t>(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            xi->data[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2];
  return detail::make_result({c, 2 * h, 2 * w}, std::move(out), "upsample_nearest2", {x},
                             [xi, c, h, w](TensorImpl& self) {
                               for (int ch = 0; ch < c; ++ch)
                                 for (int y = 0; y < 2 * h; ++y)
                                   for (int xx = 0; xx < 2 * w; ++xx)
                                     xi->grad[(static_cast<size_t>(ch) * h + y / 2) * w + xx / 2] +=
                                         self.grad[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xx];
                             });
}

// Mean binary cross-entropy computed from logits; numerically stable form
// max(x,0) - x*y + log(1+exp(-|x|)). Targets carry no gradient.
inline Tensor bce_with_logits_mean(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape())
    throw ShapeError("bce_with_logits_mean: shape mismatch " + shape_str(logits.shape()) +
                     " vs " + shape_str(targets.shape()));
  if (targets.requires_grad())
    throw DomainError("bce_with_logits_mean: targets must not require grad");
  const int n = logits.numel();
  auto li = logits.impl();
  const std::vector<float> tv = targets.impl()->data;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double x = li->data[i], y = tv[i];
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  std::vector<float> out{static_cast<float>(acc / n)};
  return detail::make_result({1}, std::move(out), "bce_with_logits_mean", {logits},
                             [li, tv, n](TensorImpl& self) {
                               float g = self.grad[0] / static_cast<float>(n);
                               for (int i = 0; i < n; ++i)
                                 li->grad[i] += g * (stable_sigmoid(li->data[i]) - tv[i]);
                             });
}

}  // namespace cmc
