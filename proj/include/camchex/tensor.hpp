// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a Node holding values, an optional gradient
// buffer and the closure that pushes the node's gradient into its parents.
// Copying a Tensor shares storage; use clone_parameter() for a deep copy.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace camchex {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input, config or shape (CLI exit code 2).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A prerequisite artifact is absent (CLI exit code 3).
class MissingDependency : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or divergence (CLI exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {
inline thread_local bool grad_mode = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != numel(shape))
      throw InputError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  /// Result of a differentiable op. Records parents and the backward closure
  /// only when recording is enabled and some parent needs a gradient.
  static Tensor from_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                        std::function<void(Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> data() { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  /// Gradient buffer; empty span until a backward pass has reached the node.
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }

  T item() const {
    if (size() != 1) throw InputError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Value copy without graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->value); }

  /// Independent leaf with the same values and gradient flag.
  Tensor clone_parameter() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  Node<T>* node() const { return node_.get(); }

  /// Reverse pass from a scalar; gradients accumulate into every reachable
  /// node that requires them.
  void backward() const {
    if (size() != 1) throw InputError("backward() requires a scalar, got " + shape_string(shape()));
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward) {
        n->ensure_grad();
        n->backward(*n);
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

}  // namespace camchex
