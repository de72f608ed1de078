#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tickgp/core/tensor.hpp"

namespace tickgp {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. `backward` reads `grad` and accumulates into parents.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  const char* op = "leaf";

  bool is_leaf() const noexcept { return !backward; }

  /// Gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
  }
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  /// Leaf variable (parameter when requires_grad, constant otherwise).
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(double v) { return Var(Tensor::scalar(v)); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  double item() const { return node_->value.item(); }

  /// Gradient accumulated by the last backward pass (zeros if none reached this node).
  const Tensor& grad() const { return node_->grad_buffer(); }

  Node& node() const { return *node_; }
  const NodePtr& node_ptr() const noexcept { return node_; }

  /// Replaces a leaf's value in place; used by optimizers between steps.
  void assign(Tensor value) {
    if (!node_->is_leaf()) throw Error("assign() on a non-leaf variable");
    if (value.shape() != node_->value.shape())
      throw ShapeError("assign() shape " + shape_string(value.shape()) + " != " + shape_string(node_->value.shape()));
    node_->value = std::move(value);
  }

 private:
  NodePtr node_;
};

/// Records the result of a differentiable op. Non-finite outputs are rejected here.
inline Var make_op(const char* op, Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  if (!value.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  node->requires_grad = needs;
  if (needs) {
    node->parents.reserve(inputs.size());
    for (auto& v : inputs) node->parents.push_back(v.node_ptr());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

/// Detached copy of a value (no gradient flows through).
inline Var constant(const Var& v) { return Var(v.value()); }

namespace detail {

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

/// Reverse sweep from a scalar objective. Leaf gradients are overwritten unless `accumulate`.
inline void backward(const Var& objective, bool accumulate = false) {
  if (objective.size() != 1)
    throw ShapeError("backward() needs a scalar objective, got " + shape_string(objective.shape()));
  if (!objective.requires_grad()) return;
  auto order = detail::topological_order(&objective.node());
  for (Node* n : order) {
    if (!n->is_leaf() || !accumulate) n->grad_buffer().fill(0.0);
  }
  objective.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    n->backward(*n);
    n->grad = Tensor();  // intermediate gradients are not needed after propagation
  }
}

/// Adds `g` (same shape as the parent's value) into parent i's gradient buffer.
inline void accumulate_grad(Node& self, std::size_t i, const Tensor& g) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return;
  auto& buf = p.grad_buffer();
  double* d = buf.data();
  const double* s = g.data();
  for (std::size_t k = 0, n = buf.size(); k < n; ++k) d[k] += s[k];
}

inline bool wants_grad(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }
inline Tensor& parent_grad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
inline const Tensor& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace tickgp
