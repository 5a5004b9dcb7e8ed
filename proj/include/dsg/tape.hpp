#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <vector>

#include "dsg/tensor.hpp"

namespace dsg {

/// Handle to a node recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode record of primitive applications. Each node keeps its forward
/// value and, when any input needs a gradient, a vector-Jacobian product that
/// maps the output gradient to one gradient per input (empty = no gradient).
///
/// A tape is single-owner and is consumed by one backward pass. Node storage
/// is a deque so values stay addressable while new nodes are recorded. Backward
/// closures may hold a reference to the tape, so it is neither copyable nor
/// movable.
template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using Vjp = std::function<std::vector<TensorT>(const TensorT& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(TensorT value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, {}, requires_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Var constant(TensorT value) { return leaf(std::move(value), false); }

  Var record(TensorT value, std::vector<Var> inputs, Vjp vjp) {
    bool needs = false;
    for (Var v : inputs) needs = needs || node(v).requires_grad;
    Node n{std::move(value), {}, {}, needs};
    if (needs) {
      n.inputs = std::move(inputs);
      n.vjp = std::move(vjp);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const TensorT& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated for v by the last backward pass; zeros when v was
  /// not reached.
  TensorT grad(Var v) const {
    const Node& n = node(v);
    if (v.id < static_cast<int>(grads_.size()) && !grads_[v.id].empty()) return grads_[v.id];
    return TensorT::zeros_like(n.value);
  }

  /// Seeds root with ones and replays vector-Jacobian products in reverse
  /// recording order.
  void backward(Var root) { backward(root, TensorT::full(value(root).shape(), T(1))); }

  void backward(Var root, TensorT seed) {
    if (seed.shape() != value(root).shape()) {
      throw ShapeError("backward seed " + shape_str(seed.shape()) + " vs root " +
                       shape_str(value(root).shape()));
    }
    grads_.assign(nodes_.size(), TensorT{});
    grads_[root.id] = std::move(seed);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (grads_[id].empty() || !n.vjp) continue;
      std::vector<TensorT> gin = n.vjp(grads_[id]);
      for (std::size_t i = 0; i < n.inputs.size() && i < gin.size(); ++i) {
        const Var in = n.inputs[i];
        if (gin[i].empty() || !nodes_[in.id].requires_grad) continue;
        if (grads_[in.id].empty()) {
          grads_[in.id] = std::move(gin[i]);
        } else {
          grads_[in.id] += gin[i];
        }
      }
    }
  }

 private:
  struct Node {
    TensorT value;
    std::vector<Var> inputs;
    Vjp vjp;
    bool requires_grad = false;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw std::out_of_range("tape: invalid variable id " + std::to_string(v.id));
    }
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  std::vector<TensorT> grads_;
};

}  // namespace dsg
