#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "stream4d/tensor.hpp"

namespace stream4d {

template <class T>
class Tape;

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a value that may participate in the active tape.
/// Copies share the underlying node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }
  static Var parameter(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records differentiable ops while active on the current thread. One tape per
/// training step; `backward` replays it in reverse and clears it.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<Node<T>> n) { nodes_.push_back(std::move(n)); }
  std::size_t size() const noexcept { return nodes_.size(); }

  void backward(const Var<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (loss.requires_grad()) {
      loss.node()->grad_buffer()[0] += T{1};
      for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node<T>& n = **it;
        if (!n.grad.empty() && n.backward) n.backward(n);
      }
    }
    clear();
  }

  void clear() { nodes_.clear(); }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Activates a tape for the enclosing scope (restores the previous one on exit).
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::active()) { Tape<T>::active() = &t; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

/// Suspends recording for the enclosing scope (teacher forwards, evaluation).
template <class T>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* prev_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Var<T>*> in) {
  for (const auto* v : in)
    if (v->requires_grad()) return true;
  return false;
}

/// Wraps `value` as an op result. When a tape is active and some input needs a
/// gradient, `make_backward` is invoked to build the closure and the node is recorded.
template <class T, class MakeBackward>
Var<T> make_result(Tensor<T> value, bool needs_grad, MakeBackward&& make_backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  Tape<T>* tape = Tape<T>::active();
  if (needs_grad && tape) {
    n->requires_grad = true;
    n->leaf = false;
    n->backward = make_backward();
    tape->record(n);
  }
  return Var<T>(std::move(n));
}

}  // namespace detail

}  // namespace stream4d
