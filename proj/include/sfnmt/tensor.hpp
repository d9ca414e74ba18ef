#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "sfnmt/errors.hpp"
#include "sfnmt/rng.hpp"

namespace sfnmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Multiply-add counter charged by matmul (2*m*k*n per call). Used by the
// instrumented FLOPs oracle; always on, the increment is negligible.
inline std::uint64_t& matmul_flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // same size as data iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;  // propagate this->grad to parents

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Dense row-major tensor with an optional reverse-mode gradient record.
// Value semantics over a shared node; data is immutable after construction
// except through explicit optimizer updates.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false) {
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor data size " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_ = std::make_shared<TensorNode<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.next_normal()) * stddev;
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.next_uniform(lo, hi));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }

  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& mutable_data() { return node_->data; }
  const std::vector<T>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const {
    return node_->data.at(r * node_->shape.at(1) + c);
  }

  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
  }

  bool all_finite() const {
    for (T v : node_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  // Build a non-leaf result. parents[i] must be defined tensors.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            std::vector<Tensor> parents,
                            std::function<void(TensorNode<T>&)> backprop) {
    Tensor t(std::move(shape), std::move(data), false);
    bool needs = false;
    for (auto& p : parents)
      if (p.requires_grad()) needs = true;
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->ensure_grad();
      for (auto& p : parents) t.node_->parents.push_back(p.node());
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

  // Reverse-mode sweep from a scalar loss. Accumulates into leaf grads;
  // repeated calls without zero_grad add up.
  void backward() const {
    if (numel() != 1) throw ContractError("backward() requires a scalar loss");
    if (!node_->requires_grad) return;

    // iterative post-order topo sort
    std::vector<TensorNode<T>*> order;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    std::unordered_set<TensorNode<T>*> visited;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        TensorNode<T>* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) {
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backprop) n->backprop(*n);
    }
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

}  // namespace sfnmt
