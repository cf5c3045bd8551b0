#pragma once

#include <functional>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lsnet/tensor.hpp"

namespace lsnet {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return tape_->value(id_).shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  /// Accumulated gradient; an all-zero tensor when nothing reached this node.
  Tensor<T> grad() const { return tape_->grad(id_); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of operations. Node ids are assigned in creation order,
/// so every input precedes its consumers and reverse id order is a valid
/// topological order for the backward sweep.
template <class T>
class Tape {
 public:
  /// Receives the tape and the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad, std::string name = {}) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(name), {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value, std::string name = {}) {
    return leaf(std::move(value), false, std::move(name));
  }

  /// Records an op output. The backward rule is kept only if some input needs
  /// a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                std::string name = {}) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw std::invalid_argument("operand belongs to a different tape");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, std::move(name),
                          needs ? std::move(backward) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  Tensor<T> grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.empty()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Gradient buffer of an input, allocated on first touch. Empty when the
  /// node does not require a gradient.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad.data();
  }

  /// Reverse sweep from a one-element loss. Accumulation order is fixed by
  /// node ids, so repeated runs give bit-identical gradients.
  void backward(const Var<T>& loss) {
    if (loss.tape_ != this) throw std::invalid_argument("loss belongs to a different tape");
    const Node& root = nodes_[loss.id_];
    if (root.value.size() != 1)
      throw ShapeError("backward needs a scalar loss, got shape " + root.value.shape().str());
    if (!root.requires_grad) throw std::logic_error("loss is detached from every trainable leaf");
    grad_buffer(loss.id_)[0] = T{1};
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad.data());
    }
  }

  /// Name (or id) of the earliest node holding NaN/Inf, if any.
  std::optional<std::string> first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].value.all_finite())
        return nodes_[i].name.empty() ? "node#" + std::to_string(i) : nodes_[i].name;
    }
    return std::nullopt;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string name;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
};

}  // namespace lsnet
