// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle to shared storage. Tensors produced by an
// operation while gradient recording is enabled carry a Node that remembers
// the inputs and a closure which, given the output gradient, accumulates the
// input gradients. `backward` walks that graph in reverse topological order.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "attnocr/errors.hpp"

namespace attnocr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

class Tensor;

namespace detail {

struct TensorImpl;

struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    impl_->data.assign(attnocr::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (attnocr::numel(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(attnocr::numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access. Only meant for leaves (parameters, buffers, inputs).
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values with no autograd history.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  detail::TensorImpl& impl() const { return *impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline std::span<double> grad_buffer(const Tensor& t) {
  auto& impl = t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

/// Wraps freshly computed values; records a Node when any input needs gradients.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, const char* op,
                   Backward&& backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::forward<Backward>(backward);
  out.impl().requires_grad = true;
  out.impl().node = std::move(node);
  return out;
}

}  // namespace detail

/**
 * Reverse-mode differentiation of a scalar.
 *
 * Leaf tensors with requires_grad accumulate into their grad across calls.
 * Interior gradients are scratch space: reset at the start of each call and
 * released once consumed, so calling backward twice on the same graph adds
 * the same contribution twice to the leaves.
 */
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS yields a topological order (inputs before outputs).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(&loss.impl(), 0);
  visited.insert(&loss.impl());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = &impl->node->inputs[next++].impl();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  // Interior buffers are allocated by the first consumer that writes to them;
  // a node whose buffer is still empty received no gradient and is skipped.
  for (auto* impl : order) {
    if (impl->node) impl->grad = {};
  }
  auto& root = loss.impl();
  if (root.grad.empty()) root.grad.assign(1, 0.0);
  root.grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (!impl->node || impl->grad.empty()) continue;
    impl->node->backward(*impl);
    impl->grad = {};
  }
}

}  // namespace attnocr
