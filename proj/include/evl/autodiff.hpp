#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every differentiable op produces a Var whose node remembers its inputs and
// a backward rule. Nodes that do not depend on any tracked leaf are recorded
// without inputs, so frozen subgraphs never receive gradient buffers.

#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evl/tensor.hpp"

namespace evl {

template <class T> struct Node {
  Tensor<T> value;
  Tensor<T> grad; // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node &)> backward_fn;

  bool has_grad() const noexcept { return !grad.empty(); }

  Tensor<T> &grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline bool &grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the current thread within its scope.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

namespace debug {
/// Sabotage switch for gradient-check sanity runs: scales the weight-side
/// gradient of matmul by 1.5 when set.
inline std::atomic<bool> corrupt_matmul_backward{false};
} // namespace debug

/// Handle to a graph node. Copies share the node.
template <class T> class Var {
public:
  Var() = default;

  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T> &value() const { return node_->value; }
  Tensor<T> &mutable_value() { return node_->value; }
  const Shape &shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->has_grad(); }
  const Tensor<T> &grad() const { return node_->grad; }
  void zero_grad() {
    if (node_->has_grad()) node_->grad.fill(T(0));
  }
  void clear_grad() { node_->grad = Tensor<T>(); }

  const std::string &op() const { return node_->op; }
  Node<T> *node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>> &node_ptr() const noexcept { return node_; }

  static Var from_node(std::shared_ptr<Node<T>> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

private:
  std::shared_ptr<Node<T>> node_;
};

/// Records an op result. The backward rule is kept only when some input is
/// tracked and grad mode is on.
template <class T>
Var<T> make_result(std::string op, Tensor<T> value,
                   std::vector<Var<T>> inputs,
                   std::function<void(Node<T> &)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = std::move(op);
  bool track = false;
  if (grad_enabled()) {
    for (const auto &in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto &in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>::from_node(std::move(node));
}

/// Ordered list of tracked nodes reachable from a root; every node appears
/// after all of its tracked inputs.
template <class T> class GradTape {
public:
  explicit GradTape(const Var<T> &root) {
    if (!root.requires_grad()) return;
    std::unordered_set<const Node<T> *> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T> *, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto &[node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T> *child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<T> *> &nodes() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

  /// Replays backward rules from the root (last node) to the leaves.
  void replay() const {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T> *n = *it;
      if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
  }

private:
  std::vector<Node<T> *> order_;
};

/// Populates gradients of every tracked ancestor of a scalar loss.
template <class T> void backward(const Var<T> &loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward() called on a value that does not depend on any tracked tensor");
  }
  GradTape<T> tape(loss);
  loss.node()->grad_buffer()[0] += T(1);
  tape.replay();
}

/// Adds `delta` into the gradient of input `i` of `self` when that input is
/// tracked. Untracked inputs are never given a buffer.
template <class T, class F>
void accumulate_into(Node<T> &self, std::size_t i, F &&fill) {
  Node<T> &in = *self.inputs[i];
  if (!in.requires_grad) return;
  fill(in.grad_buffer());
}

} // namespace evl
