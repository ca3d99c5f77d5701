#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "blackfed/tensor.hpp"

namespace blackfed {

template <typename T>
class Graph;

/// Handle to a node recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return graph->value(*this).shape(); }
};

/// Tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward() is a single reverse sweep. A node only
/// gets a backward closure when one of its inputs requires a gradient; graphs
/// built from constants alone therefore cost no more than a plain forward.
/// One graph belongs to one training step.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Trainable leaf; its gradient is available after backward().
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), true, {}); }

  Var<T> record(Tensor<T> value, bool requires_grad, Backward backward) {
    return push(std::move(value), requires_grad, requires_grad ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }

  /// Adjoint of a node; zeros if backward() never reached it.
  const Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id);
    ensure_grad(n);
    return n.grad;
  }

  /// Mutable adjoint slot used by op closures to accumulate into an input.
  Tensor<T>& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    ensure_grad(n);
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(Var<T> loss) {
    if (loss.graph != this) throw Error(ErrorCode::contract_violation, "backward on a foreign graph");
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1) {
      throw Error(ErrorCode::contract_violation,
                  "backward needs a scalar loss, got shape " + shape_string(root.value.shape()));
    }
    if (backward_done_) throw Error(ErrorCode::contract_violation, "backward called twice on one graph");
    backward_done_ = true;
    ensure_grad(root);
    root.grad[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.has_grad) continue;
      n.backward(*this, id);
    }
  }

  const Tensor<T>& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, false, std::move(backward)});
    return Var<T>{this, nodes_.size() - 1};
  }

  static void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape(), T(0));
      n.has_grad = true;
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace blackfed
