// Dense row-major float32 tensor with reverse-mode differentiation.
//
// A Tensor is a handle to a node in an implicit computation DAG: ops in
// ops.hpp attach a backward closure and parent links to their results.
// Graph::trace(root) freezes the reverse topological order; backward() walks
// it exactly once, accumulating gradients into every node that requires them.
// Values are stored as float32, reductions accumulate in float64, and every
// traversal order is fixed, so identical inputs give bit-identical outputs.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "cmc/common.hpp"

namespace cmc {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // sized like data iff requires_grad
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this->grad, accumulates into parents' grad buffers.
  std::function<void(TensorImpl&)> backward_fn;
  bool backward_ran = false;

  int numel() const {
    int n = 1;
    for (int e : shape) n *= e;
    return n;
  }
};

inline int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl>();
    int n = shape_numel(shape);
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), 0.0f);
    if (requires_grad) {
      impl->requires_grad = true;
      impl->grad.assign(static_cast<size_t>(n), 0.0f);
    }
    return Tensor(impl);
  }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.impl_->data) x = v;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<float> data,
                     bool requires_grad = false) {
    int n = shape_numel(shape);
    if (static_cast<size_t>(n) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int numel() const { return impl_->numel(); }
  int extent(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }

  std::span<const float> data() const { return impl_->data; }
  // Mutation is only meaningful on leaves (weights, buffers); results of ops
  // are treated as immutable.
  std::vector<float>& mutable_data() { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) {
    impl_->requires_grad = v;
    impl_->grad.assign(v ? impl_->data.size() : 0, 0.0f);
  }
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad() {
    for (auto& g : impl_->grad) g = 0.0f;
    impl_->backward_ran = false;
  }

  float item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  float at(std::initializer_list<int> idx) const {
    if (idx.size() != impl_->shape.size())
      throw ShapeError("index rank mismatch for " + shape_str(shape()));
    size_t off = 0, stride = 1;
    const auto& s = impl_->shape;
    size_t d = s.size();
    std::vector<int> ix(idx);
    for (size_t i = d; i-- > 0;) {
      off += static_cast<size_t>(ix[i]) * stride;
      stride *= static_cast<size_t>(s[i]);
    }
    return impl_->data[off];
  }

  Tensor clone() const {
    Tensor t = Tensor::from(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
  }

  void backward();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Frozen reverse-topological view over the DAG reachable from one root.
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    g.root_ = root.impl();
    if (!g.root_) throw Error("trace of undefined tensor");
    if (g.root_->backward_ran)
      throw Error("backward already ran for this graph; re-run forward first");
    // Iterative post-order DFS; each node appears exactly once.
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(g.root_.get(), 0);
    seen.insert(g.root_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorImpl* p = node->parents[next++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  void backward() {
    if (done_) throw Error("backward already ran for this graph; re-run forward first");
    if (root_->numel() != 1)
      throw ShapeError("backward root must be scalar, got " + shape_str(root_->shape));
    if (!root_->requires_grad)
      throw Error("backward root does not require grad");
    root_->grad[0] = 1.0f;
    for (size_t i = order_.size(); i-- > 0;) {
      TensorImpl* n = order_[i];
      if (n->backward_fn) n->backward_fn(*n);
    }
    done_ = true;
    root_->backward_ran = true;
  }

  size_t size() const { return order_.size(); }

 private:
  std::shared_ptr<TensorImpl> root_;
  std::vector<TensorImpl*> order_;  // post-order: root last
  bool done_ = false;
};

inline void Tensor::backward() { Graph::trace(*this).backward(); }

namespace detail {

// Accumulate a contribution into a parent's gradient buffer if it wants one.
inline void accum_grad(const std::shared_ptr<TensorImpl>& p, size_t i, float v) {
  if (p->requires_grad) p->grad[i] += v;
}

inline Tensor make_result(std::vector<int> shape, std::vector<float> data, const char* op,
                          std::vector<Tensor> parents,
                          std::function<void(TensorImpl&)> backward_fn) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  int n = shape_numel(shape);
  if (static_cast<size_t>(n) != data.size()) throw ShapeError("internal: bad result buffer");
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    impl->requires_grad = true;
    impl->grad.assign(impl->data.size(), 0.0f);
    for (const auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(impl);
}

}  // namespace detail

}  // namespace cmc
