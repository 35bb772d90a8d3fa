#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "leakmem/errors.hpp"

namespace leakmem {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TensorNode&)> adjoint;

  std::vector<Real>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

/// Dense row-major array that participates in reverse-mode differentiation.
///
/// A Tensor is a cheap handle: copies share the same node. Results of
/// primitives keep their inputs alive until the last handle goes away, so the
/// graph for one loss is released as soon as the step that built it ends.
template <class Real>
class Tensor {
 public:
  using value_type = Real;
  using Node = TensorNode<Real>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) shape = {1};
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw DimensionError("shape " + shape_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor vector(std::vector<Real> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const Real> data() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<Real> mutable_data() { return node_->value; }
  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return node_->value[0];
  }
  std::vector<Real> to_vector() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  const char* op_name() const { return node_->op; }

  // Fresh leaf holding a copy of the values, cut from any graph.
  Tensor detach_copy(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered record of the primitive applications reachable from a
/// root, restricted to nodes that require gradients. Replaying adjoints in
/// reverse order is the backward pass.
template <class Real>
class GraphTape {
 public:
  using Node = TensorNode<Real>;

  static GraphTape record(const Tensor<Real>& root) {
    GraphTape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_set<const Node*> seen;
    // Iterative post-order DFS; inputs land before their consumers.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.entries_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Node*>& entries() const { return entries_; }

  // Assumes every entry's grad buffer is sized and the root is seeded.
  void replay_adjoints() const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if ((*it)->adjoint) (*it)->adjoint(**it);
    }
  }

 private:
  std::vector<Node*> entries_;
};

/// Accumulates d(loss)/d(t) into every requires_grad tensor reachable from
/// `loss`. Leaf gradients accumulate across calls until zero_grad().
template <class Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;
  auto tape = GraphTape<Real>::record(loss);
  for (auto* n : tape.entries()) n->ensure_grad();
  // Intermediate nodes start from zero each pass; leaves keep accumulating.
  for (auto* n : tape.entries()) {
    if (!n->inputs.empty() || n->adjoint) std::fill(n->grad.begin(), n->grad.end(), Real(0));
  }
  loss.node()->grad[0] += Real(1);
  tape.replay_adjoints();
}

namespace detail {

// Builds an op result. The adjoint is only attached when some input needs it,
// so inference runs never retain the graph.
template <class Real, class Adjoint>
Tensor<Real> make_result(Shape shape, std::vector<Real> value, const char* op,
                         std::vector<Tensor<Real>> inputs, Adjoint&& adjoint) {
  Tensor<Real> out(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) node.inputs.push_back(in.node());
    node.adjoint = std::forward<Adjoint>(adjoint);
  }
  return out;
}

// Gradient buffer of an input if it participates, else nullptr.
template <class Real>
std::vector<Real>* input_grad(TensorNode<Real>& out, std::size_t i) {
  auto& in = *out.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

}  // namespace detail

}  // namespace leakmem
