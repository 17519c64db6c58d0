// Copyright 2026 The fedsis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense row-major tensors with a tape-free reverse-mode autodiff graph.
//
// Every op result keeps shared ownership of its inputs and a closure that
// propagates its adjoint into them. backward() sorts the reachable graph
// topologically and walks it once in reverse, so a tensor consumed by several
// ops accumulates every contribution. Graphs are owned by whichever thread
// built them; nothing here is synchronized.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedsis/error.hpp"

namespace fedsis {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaves with requires_grad only
  bool requires_grad = false;
  bool leaf = true;

  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->adj, adds into inputs[i]->adj for every active input.
  std::function<void(Node&)> backward_fn;

  // Scratch state owned by a running backward pass.
  std::vector<T> adj;
  bool active = false;
  bool target = false;

  bool wants(std::size_t i) const { return inputs[i]->active; }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() { return detail::no_grad_depth == 0; }

template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape), fill);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    for (std::size_t e : shape) {
      if (e == 0) throw Error("shape", "zero extent in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw Error("shape", "data length " + std::to_string(data.size()) +
                               " does not match " + shape_str(shape));
    }
    auto n = std::make_shared<NodeType>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), T(0));
    return BasicTensor(std::move(n));
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return from(Shape{}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  std::span<const T> data() const { return node_->value; }
  // Leaf storage is writable so optimizers can update parameters in place.
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }

  T item() const {
    if (numel() != 1) throw Error("shape", "item() on " + shape_str(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Same values, no graph history, no gradient.
  BasicTensor detach() const { return from(shape(), node_->value, false); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

/// Builds an op result. When no input requires a gradient (or grad mode is
/// off) the closure and the input references are dropped immediately.
template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> value,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  bool rg = false;
  if (grad_mode_enabled()) {
    for (const auto& in : inputs) rg = rg || in.requires_grad();
  }
  n->requires_grad = rg;
  if (rg) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return BasicTensor<T>(std::move(n));
}

}  // namespace detail

/// Reverse-mode sweep from a rank-0 root. Leaf gradients accumulate (call
/// zero_grad() between independent passes). When `wrt` is non-empty only
/// those leaves receive gradients and only the sub-graph leading to them is
/// traversed; otherwise every requires_grad leaf does.
template <class T>
void backward(const BasicTensor<T>& root, std::span<const BasicTensor<T>> wrt = {}) {
  using N = detail::Node<T>;
  if (!root.defined() || root.rank() != 0) {
    throw Error("non-scalar-root",
                root.defined() ? shape_str(root.shape()) : std::string("undefined"));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS: inputs precede consumers in `order`.
  std::vector<N*> order;
  {
    std::vector<std::pair<N*, std::size_t>> stack;
    std::vector<N*> seen;
    auto visited = [](N* n) { return n->active; };  // reused as a visit mark
    stack.emplace_back(root.node(), 0);
    root.node()->active = true;
    seen.push_back(root.node());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->inputs.size()) {
        N* child = n->inputs[next++].get();
        if (child->requires_grad && !visited(child)) {
          child->active = true;
          seen.push_back(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (N* n : seen) n->active = false;
  }

  const bool filtered = !wrt.empty();
  for (const auto& w : wrt) w.node()->target = true;
  for (N* n : order) {
    if (n->leaf) {
      n->active = n->requires_grad && (!filtered || n->target);
    } else {
      bool any = false;
      for (const auto& in : n->inputs) any = any || in->active;
      n->active = any;
    }
    if (n->active) n->adj.assign(n->value.size(), T(0));
  }

  if (root.node()->active) {
    root.node()->adj[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      N* n = *it;
      if (!n->active) continue;
      if (n->leaf) {
        for (std::size_t i = 0; i < n->adj.size(); ++i) n->grad[i] += n->adj[i];
      } else {
        n->backward_fn(*n);
      }
    }
  }

  for (N* n : order) {
    n->active = false;
    n->target = false;
    std::vector<T>().swap(n->adj);
  }
  for (const auto& w : wrt) w.node()->target = false;
}

template <class T>
void backward(const BasicTensor<T>& root, const std::vector<BasicTensor<T>>& wrt) {
  backward(root, std::span<const BasicTensor<T>>(wrt));
}

}  // namespace fedsis
