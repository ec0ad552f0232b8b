// Contrastive similarity losses over multiview embedding sets.
//
// An EmbeddingSet packs B scene instances with V = M*N views each (M
// modalities, N augmentation draws per modality). Two losses are provided:
//   - pairwise_loss: one batch of 2N views with a perfect matching of positive
//     pairs; for anchor i the denominator runs over all other views k != i,
//     so the positive k=j stays in the denominator.
//   - fullgraph_cmc_loss: every ordered view pair (v,w), v != w, contributes a
//     term per instance t; the positive is view w of the same instance and the
//     denominator runs over view w of all instances i = 1..B including i = t.
// loss_oracle recomputes the full-graph loss with plain double loops and no
// shared code, for verification.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cmc/ops.hpp"

namespace cmc {

struct EmbeddingSet {
  Tensor z;                           // [B x V x D]
  std::vector<int> modality_of_view;  // length V, values in 1..M
  float tau = 0.1f;

  int instances() const { return z.extent(0); }
  int views() const { return z.extent(1); }
  int dim() const { return z.extent(2); }

  int modalities() const {
    int m = 0;
    for (int v : modality_of_view) m = std::max(m, v);
    return m;
  }

  // V == M*N with every modality index appearing exactly N times, tau > 0.
  void validate() const {
    if (!z.defined() || z.rank() != 3)
      throw ShapeError("embedding set: need z[B x V x D]");
    const int V = views();
    if (static_cast<int>(modality_of_view.size()) != V)
      throw ShapeError("embedding set: modality map length " +
                       std::to_string(modality_of_view.size()) + " vs V=" + std::to_string(V));
    if (!(tau > 0.0f)) throw DomainError("embedding set: temperature must be positive");
    const int M = modalities();
    if (M < 1) throw DomainError("embedding set: no modalities");
    std::vector<int> count(static_cast<size_t>(M), 0);
    for (int v : modality_of_view) {
      if (v < 1 || v > M) throw DomainError("embedding set: modality index out of range");
      ++count[static_cast<size_t>(v - 1)];
    }
    for (int c : count)
      if (c != count[0] || c == 0)
        throw DomainError("embedding set: modalities must each contribute the same view count");
  }
};

// Scalar cosine similarity, differentiable through both arguments.
inline Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1 || u.numel() != v.numel())
    throw ShapeError("cosine_similarity: need equal-length vectors, got " +
                     shape_str(u.shape()) + " and " + shape_str(v.shape()));
  const int d = u.numel();
  Tensor nu = row_normalize(reshape(u, {1, d}));
  Tensor nv = row_normalize(reshape(v, {1, d}));
  return reshape(matmul(nu, transpose2d(nv)), {1});
}

namespace detail {

// partner[i] = j must be a perfect matching: j != i, partner[j] == i.
inline void check_matching(const std::vector<int>& partner, int n) {
  if (static_cast<int>(partner.size()) != n)
    throw DomainError("pairing: expected " + std::to_string(n) + " entries, got " +
                      std::to_string(partner.size()));
  for (int i = 0; i < n; ++i) {
    int j = partner[static_cast<size_t>(i)];
    if (j < 0 || j >= n || j == i || partner[static_cast<size_t>(j)] != i)
      throw DomainError("pairing: view " + std::to_string(i) + " is not perfectly matched");
  }
}

}  // namespace detail

// Contrastive loss over one batch of views z[n x D] with positive pairs given
// by a perfect matching. Both orders of every pair are summed, so n views
// yield n loss terms. Anchor i's denominator covers every view except itself.
inline Tensor pairwise_loss(const Tensor& z, const std::vector<int>& partner, float tau) {
  if (z.rank() != 2) throw ShapeError("pairwise_loss: need z[n x D]");
  const int n = z.extent(0);
  if (n < 2) throw DomainError("pairwise_loss: need at least one pair of views");
  detail::check_matching(partner, n);
  if (!(tau > 0.0f)) throw DomainError("pairwise_loss: temperature must be positive");

  Tensor norm = row_normalize(z);
  Tensor sim = scale(matmul(norm, transpose2d(norm)), 1.0f / tau);  // [n x n]
  Tensor off = drop_diagonal(sim);                                  // [n x n-1]
  Tensor denom = logsumexp(off, 1);                                 // [n]
  std::vector<int> pos_col(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int j = partner[static_cast<size_t>(i)];
    pos_col[static_cast<size_t>(i)] = j < i ? j : j - 1;  // column of j once the diagonal is gone
  }
  Tensor pos = gather_cols(off, pos_col);  // [n]
  return reduce_sum(sub(denom, pos));
}

// Full-graph multiview loss: sum over instances t and ordered view pairs
// (v,w), v != w, of -log( exp(s(t,v; t,w)/tau) / sum_i exp(s(t,v; i,w)/tau) ).
// The i = t positive stays in the denominator, so every term is >= 0.
// With mean = true the sum is divided by B*V*(V-1).
inline Tensor fullgraph_cmc_loss(const EmbeddingSet& e, bool mean = false) {
  e.validate();
  const int B = e.instances(), V = e.views();
  if (B < 2)
    throw DomainError("fullgraph loss: need at least 2 instances for negatives, got " +
                      std::to_string(B));
  if (V < 2) throw DomainError("fullgraph loss: need at least 2 views, got " + std::to_string(V));

  std::vector<Tensor> norm(static_cast<size_t>(V));
  for (int v = 0; v < V; ++v) norm[static_cast<size_t>(v)] = row_normalize(select_plane(e.z, v));

  Tensor total;
  for (int v = 0; v < V; ++v) {
    for (int w = 0; w < V; ++w) {
      if (w == v) continue;
      Tensor sim = scale(matmul(norm[static_cast<size_t>(v)],
                                transpose2d(norm[static_cast<size_t>(w)])),
                         1.0f / e.tau);      // [B x B]; row t: anchor (t,v) vs (i,w)
      Tensor pos = diag2d(sim);              // positives (t,v; t,w)
      Tensor denom = logsumexp(sim, 1);      // over all instances, t included
      Tensor term = reduce_sum(sub(denom, pos));
      total = total.defined() ? add(total, term) : term;
    }
  }
  if (mean) total = scale(total, 1.0f / (static_cast<float>(B) * V * (V - 1)));
  return total;
}

// Double-precision re-derivation of fullgraph_cmc_loss by explicit loops.
// Shares no code with the graph path; limited to small instances.
inline double loss_oracle(const EmbeddingSet& e, bool mean = false) {
  e.validate();
  const int B = e.instances(), V = e.views(), D = e.dim();
  if (B * V > 64)
    throw DomainError("loss oracle: instance too large (B*V = " + std::to_string(B * V) + " > 64)");
  if (B < 2) throw DomainError("loss oracle: need at least 2 instances");

  auto vec = [&](int t, int v) {
    std::vector<double> r(static_cast<size_t>(D));
    for (int j = 0; j < D; ++j)
      r[static_cast<size_t>(j)] = e.z.data()[(static_cast<size_t>(t) * V + v) * D + j];
    return r;
  };
  auto cos = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (int j = 0; j < D; ++j) {
      ab += a[static_cast<size_t>(j)] * b[static_cast<size_t>(j)];
      aa += a[static_cast<size_t>(j)] * a[static_cast<size_t>(j)];
      bb += b[static_cast<size_t>(j)] * b[static_cast<size_t>(j)];
    }
    double na = std::sqrt(aa), nb = std::sqrt(bb);
    if (na < 1e-12 || nb < 1e-12) throw DomainError("loss oracle: zero-norm embedding");
    return ab / (na * nb);
  };

  double total = 0.0;
  for (int t = 0; t < B; ++t) {
    for (int v = 0; v < V; ++v) {
      std::vector<double> anchor = vec(t, v);
      for (int w = 0; w < V; ++w) {
        if (w == v) continue;
        std::vector<double> scores(static_cast<size_t>(B));
        for (int i = 0; i < B; ++i) scores[static_cast<size_t>(i)] = cos(anchor, vec(i, w)) / e.tau;
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double acc = 0.0;
        for (double s : scores) acc += std::exp(s - mx);
        total += (mx + std::log(acc)) - scores[static_cast<size_t>(t)];
      }
    }
  }
  if (mean) total /= static_cast<double>(B) * V * (V - 1);
  return total;
}

}  // namespace cmc
