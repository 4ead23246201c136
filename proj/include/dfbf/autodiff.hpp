#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dfbf/error.hpp"
#include "dfbf/tensor.hpp"

namespace dfbf {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::string name;
};

/// Shared handle to a value plus its gradient buffer.
///
/// Copying a Var aliases the same node; use `detached()` for an independent
/// copy. Ops record onto a Tape only when at least one operand requires grad.
template <typename T>
class Var {
 public:
  Var() : node_(std::make_shared<Node<T>>()) {}

  explicit Var(Tensor<T> value, bool requires_grad = false, std::string name = {})
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->name = std::move(name);
  }

  const Tensor<T>& value() const noexcept { return node_->value; }
  Tensor<T>& value() noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t size() const noexcept { return node_->value.size(); }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool on) noexcept { node_->requires_grad = on; }

  const std::string& name() const noexcept { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }

  bool has_grad() const noexcept { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }
  const Tensor<T>& grad() const {
    if (!has_grad()) {
      throw Error("no gradient stored for '" + node_->name + "'");
    }
    return node_->grad;
  }

  /// Gradient buffer, zero-initialized on first access. Var is a handle, so this
  /// is available through const references too.
  Tensor<T>& grad_buffer() const {
    if (node_->grad.size() != node_->value.size() || node_->grad.shape() != node_->value.shape()) {
      node_->grad = Tensor<T>(node_->value.shape());
    }
    return node_->grad;
  }

  void zero_grad() const {
    if (!node_->grad.empty()) node_->grad.fill(T{0});
  }
  void clear_grad() const { node_->grad = Tensor<T>(); }

  Var detached() const { return Var(node_->value, false, node_->name); }

  bool same_node(const Var& other) const noexcept { return node_ == other.node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of executed differentiable operations.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::string op;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::function<void()> backward) {
    entries_.push_back(Entry{std::string(op), std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  /// Drops every entry together with the activations it captured.
  void clear() noexcept { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays every entry once in reverse order.
  /// Gradients accumulate into requires_grad vars. The tape is cleared afterwards.
  void backward(Var<T> loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (entries_.empty()) {
      throw Error("backward: tape is empty");
    }
    if (!loss.value().all_finite()) {
      throw NumericError("backward: loss is not finite");
    }
    loss.grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward();
    }
    entries_.clear();
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace dfbf
