// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmstew/tensor.hpp"

namespace cmstew {

template <typename S>
class Tape;

// Handle to a tape node.  Cheap to copy; valid while the tape lives.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const TensorT<S>& val() const;
  const std::vector<int>& shape() const;
  int rows() const { return val().rows(); }
  int cols() const { return val().cols(); }
};

// Reverse-mode tape.  One tape per forward pass; nodes are closed over by
// their backprop closures and replayed in reverse creation order.  A
// parameter is registered once per tape, so gradients from repeated use
// accumulate into a single node before being flushed to Parameter::grad.
template <typename S>
class Tape {
 public:
  struct Node {
    TensorT<S> value;
    TensorT<S> grad;
    bool needs_grad = false;
    std::function<void()> backprop;  // empty for leaves
  };

  Var<S> constant(TensorT<S> v) {
    return push(std::move(v), false, nullptr);
  }

  Var<S> param(ParameterT<S>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var<S>{this, it->second};
    Var<S> v = push(p.value, p.trainable, nullptr);
    param_ids_.emplace(&p, v.id);
    params_.emplace_back(&p, v.id);
    return v;
  }

  Var<S> push(TensorT<S> value, bool needs_grad, std::function<void()> bp) {
    Node n;
    n.value = std::move(value);
    n.grad = TensorT<S>(n.value.shape());
    n.needs_grad = needs_grad;
    n.backprop = std::move(bp);
    nodes_.push_back(std::move(n));
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const TensorT<S>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  TensorT<S>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Ops need their own output id inside the closure, so it is attached
  // after the node exists.
  void set_backprop(int id, std::function<void()> bp) {
    nodes_[static_cast<std::size_t>(id)].backprop = std::move(bp);
  }

  // Seeds d(loss)/d(loss) = 1, replays closures newest-first, then adds
  // each trainable parameter's node gradient into Parameter::grad.
  void backward(Var<S> loss) {
    check_arg(loss.tape == this && loss.id >= 0, "backward: foreign variable");
    check_arg(value(loss.id).size() == 1, "backward: loss must be a scalar");
    grad(loss.id)[0] = S(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.needs_grad && n.backprop) n.backprop();
    }
    for (auto& [p, id] : params_) {
      if (!p->trainable) continue;
      const TensorT<S>& g = nodes_[static_cast<std::size_t>(id)].grad;
      for (std::int64_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  // Deque keeps references to existing nodes valid while ops push new
  // ones; forward code holds value() references across pushes.
  std::deque<Node> nodes_;
  std::unordered_map<const void*, int> param_ids_;
  std::vector<std::pair<ParameterT<S>*, int>> params_;
};

template <typename S>
const TensorT<S>& Var<S>::val() const {
  return tape->value(id);
}

template <typename S>
const std::vector<int>& Var<S>::shape() const {
  return val().shape();
}

}  // namespace cmstew
