// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a dynamic reverse-mode tape.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace classched::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_disabled()) { detail::grad_mode_disabled() = true; }
  ~NoGradGuard() { detail::grad_mode_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return !detail::grad_mode_disabled(); }

/// Handle to a tensor node. Copies share the node (and therefore values and grad).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.empty()) throw std::invalid_argument("tensor: shape must have at least one extent");
    for (std::size_t e : shape) {
      if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (optimizer updates, test perturbations).
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (numel() != 1) throw std::logic_error("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf) throw std::logic_error("set_requires_grad: only leaves can be toggled");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool is_leaf() const { return node_->is_leaf; }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  /// Untracked copy of the current values.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Same storage semantics as detach but with a fresh leaf that tracks gradients.
  Tensor clone_leaf() const { return from(shape(), node_->value, node_->requires_grad); }

  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds a (possibly tracked) result node. `fn` is only retained when some input
/// requires grad and recording is enabled.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(value), false);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  Node& n = *out.node();
  n.op = op;
  n.is_leaf = !track;
  if (track) {
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (auto& in : inputs) n.parents.push_back(in.node());
    n.backward_fn = std::move(fn);
  }
  return out;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (!defined()) throw std::logic_error("backward: undefined tensor");
  if (numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar-shaped, got " + shape_str(shape()));
  }
  if (!requires_grad()) throw std::logic_error("backward: root is not produced by tracked computation");

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf) continue;
    for (auto& p : n->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    if (n->backward_fn) n->backward_fn(*n);
  }
  // Drop the tape: interior nodes release their history and scratch gradients.
  for (detail::Node* n : order) {
    if (n->is_leaf) continue;
    n->grad.clear();
    n->parents.clear();
    n->backward_fn = nullptr;
  }
}

}  // namespace classched::diff
