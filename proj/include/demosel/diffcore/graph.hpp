#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "demosel/diffcore/tensor.hpp"

namespace demosel::diff {

/// One record of the dynamic tape. Interior nodes hold the closure that
/// pushes their output gradient into their parents.
struct Node {
  Tensor value;
  std::vector<double> grad;     // accumulated dLoss/dValue, leaves only
  std::vector<double> scratch;  // per-backward buffer, cleared afterwards
  bool requires_grad = false;   // leaf parameter
  bool needs_grad = false;      // leaf parameter or depends on one
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& scratch_buffer() {
    if (scratch.empty()) scratch.assign(value.size(), 0.0);
    return scratch;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

/// Disables tape recording for its lifetime; used for frozen-parameter rollouts.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  static Var parameter(Tensor value, std::string name = {}) {
    auto node = std::make_shared<Node>();
    node->grad.assign(value.size(), 0.0);
    node->value = std::move(value);
    node->requires_grad = true;
    node->needs_grad = true;
    node->name = std::move(name);
    return Var(std::move(node));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool needs_grad() const { return node_->needs_grad; }
  const std::string& name() const { return node_->name; }

  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Wraps a freshly computed value; records parents and the backward closure
// only when some parent carries gradient and recording is enabled.
inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.needs_grad(); });
    if (any) {
      node->needs_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior buffers are private to the sweep, so two calls give exactly twice
/// the gradient.
inline void backward(const Var& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.needs_grad()) return;

  // Iterative post-order DFS gives a topological order; each node once.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&loss.node(), 0);
  visited.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->needs_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().scratch_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& node = **it;
    if (node.scratch.empty()) continue;
    if (node.backward_fn) node.backward_fn(node);
    if (node.requires_grad) {
      if (node.grad.size() != node.scratch.size()) node.grad.assign(node.scratch.size(), 0.0);
      for (std::size_t i = 0; i < node.grad.size(); ++i) node.grad[i] += node.scratch[i];
    }
  }
  for (Node* node : order) {
    node->scratch.clear();
    node->scratch.shrink_to_fit();
  }
}

}  // namespace demosel::diff
