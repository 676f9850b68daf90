#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "streamsynth/tensor.hpp"

namespace streamsynth {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  double item() const;
};

/// Linear record of executed primitives for reverse-mode differentiation.
///
/// Operations are appended in execution order, so the record is always
/// topologically sorted; backward() walks it in exact reverse. A tape is
/// confined to one thread; borrowed tensors must outlive it.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Owned value that never receives a gradient.
  Var constant(Tensor t) { return push(std::move(t), nullptr, nullptr, false); }

  /// Borrowed frozen tensor (e.g. a frozen parameter); never receives a gradient.
  Var constant_ref(const Tensor& t) { return push(Tensor{}, &t, nullptr, false); }

  /// Owned value whose gradient can be read with grad() after backward().
  Var leaf(Tensor t) { return push(std::move(t), nullptr, nullptr, true); }

  /// Borrowed trainable tensor; backward() adds into `p.grad`.
  Var param(Tensor& p) { return push(Tensor{}, &p, &p, true); }

  /// Routes to param() or constant_ref() depending on `trainable`.
  Var use(Tensor& p, bool trainable) { return trainable ? param(p) : constant_ref(p); }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
  }
  const Tensor& value(Var v) const { return value(v.id); }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient buffer of a node; empty when the node does not require grad or
  /// backward() has not run yet.
  std::span<double> grad(std::size_t id) { return nodes_[id].grad; }
  std::span<double> grad(Var v) { return grad(v.id); }

  /// Appends a primitive. `fn` reads the output gradient and accumulates into
  /// input gradients; it is skipped when no input requires grad.
  Var record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(out), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor out, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    Var v = push(std::move(out), nullptr, nullptr, needs);
    if (needs) ops_.push_back(Op{v.id, std::move(fn)});
    return v;
  }

  /// Reverse-mode sweep from a scalar loss.
  void backward(Var loss) {
    if (loss.tape != this) throw Error("loss was not recorded on this tape");
    if (value(loss).size() != 1)
      throw DimensionError("backward requires a scalar loss, got shape " + shape_string(value(loss).shape));
    for (Node& n : nodes_)
      if (n.requires_grad) n.grad.assign(value_size(n), 0.0);
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (it->output > loss.id) continue;
      it->backward(*this);
    }
    for (Node& n : nodes_) {
      if (!n.sink) continue;
      if (n.sink->grad.size() != n.grad.size()) n.sink->grad.assign(n.grad.size(), 0.0);
      for (std::size_t k = 0; k < n.grad.size(); ++k) n.sink->grad[k] += n.grad[k];
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_ops() const { return ops_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    Tensor* sink = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
  };
  struct Op {
    std::size_t output;
    BackwardFn backward;
  };

  static std::size_t value_size(const Node& n) { return n.borrowed ? n.borrowed->size() : n.owned.size(); }

  Var push(Tensor owned, const Tensor* borrowed, Tensor* sink, bool requires_grad) {
    Node n;
    n.owned = std::move(owned);
    n.borrowed = borrowed;
    n.sink = sink;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::vector<Op> ops_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

inline double Var::item() const {
  const Tensor& t = value();
  if (t.size() != 1) throw DimensionError("item() on non-scalar of shape " + shape_string(t.shape));
  return t.data[0];
}

}  // namespace streamsynth
