#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osreg/tensor.hpp"

namespace osreg {

enum class OpKind : std::uint8_t {
  Leaf,
  Conv2d,
  MaxPool2d,
  GlobalAvgPool,
  Dense,
  LeakyRelu,
  BatchNorm,
  Dropout,
  Softmax,
  ChannelMask,
  Add,
  Sub,
  Mul,
  Scale,
  Sum,
  Mean,
  PickColumn,
  CrossEntropyMasked,
  Consistency,
  Sntg,
  Amc,
  SphereProject,
  OsLoss,
};

const char* op_name(OpKind op);

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  /// Adjoint accumulated by the last backward(); empty before.
  const Tensor<T>& grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of primitive applications. Nodes are appended in evaluation order,
/// so the tape is topologically sorted by construction and backward() walks
/// it in exact reverse.
///
/// A node requires a gradient iff it is a leaf created with requires_grad, or
/// any of its inputs requires one. Nodes that do not require a gradient keep
/// no adjoint closure.
template <typename T>
class Graph {
 public:
  using Adjoint = std::function<void(Graph&, std::size_t self)>;

  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Adjoint adjoint;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends a primitive application. `adjoint` must add the node's output
  /// adjoint, mapped through the primitive, into each input via accumulate().
  Var<T> record(OpKind op, std::vector<Var<T>> inputs, Tensor<T> out, Adjoint adjoint) {
    Node n;
    n.op = op;
    for (const auto& v : inputs) {
      if (&v.graph() != this) throw std::invalid_argument("record: input from another graph");
      n.inputs.push_back(v.id());
      n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
    }
    n.value = std::move(out);
    if (n.requires_grad) n.adjoint = std::move(adjoint);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Mutable adjoint buffer of `id`, zero-allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
    return n.grad;
  }

  /// Adds `delta` (same shape as the node value) into the adjoint of `id`.
  /// No-op for nodes that do not require a gradient.
  void accumulate(std::size_t id, const Tensor<T>& delta) {
    if (!nodes_[id].requires_grad) return;
    auto& g = grad_buffer(id);
    auto dst = g.values();
    auto src = delta.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
  }

  /// Reverse-mode sweep from a scalar root. Interior adjoints are recomputed;
  /// leaf adjoints accumulate across calls until zero_grad(). Every leaf
  /// that requires a gradient ends with an allocated (possibly zero) buffer.
  void backward(Var<T> root) {
    if (&root.graph() != this) throw std::invalid_argument("backward: root from another graph");
    if (root.value().size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  shape_str(root.value().shape()));
    for (std::size_t i = 0; i <= root.id(); ++i)
      if (nodes_[i].op != OpKind::Leaf) nodes_[i].grad = Tensor<T>();
    grad_buffer(root.id())[0] += T{1};
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.op == OpKind::Leaf) {
        grad_buffer(i);
        continue;
      }
      if (n.grad.empty() || !n.adjoint) continue;
      n.adjoint(*this, i);
    }
    for (std::size_t i = root.id() + 1; i < nodes_.size(); ++i)
      if (nodes_[i].requires_grad && nodes_[i].op == OpKind::Leaf) grad_buffer(i);
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return graph_->requires_grad(id_);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return graph_->grad(id_);
}

}  // namespace osreg
