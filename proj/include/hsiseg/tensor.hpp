#pragma once

// Dense row-major tensor with reverse-mode differentiation.
//
// Every differentiable operation appends a closure to the thread-local tape
// of its scalar type when at least one input participates in gradients.
// `backward(loss)` replays the tape in reverse and then clears it, so a tape
// lives for exactly one forward/backward pair. Workers that run forward
// passes concurrently each own their thread's tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "hsiseg/errors.hpp"

namespace hsiseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

inline thread_local bool grad_mode_enabled = true;

}  // namespace detail

/// Ordered record of executed operations for one thread and scalar type.
template <typename T>
class Tape {
 public:
  struct Entry {
    detail::NodePtr<T> output;
    std::function<void()> backward;
  };

  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  void record(detail::NodePtr<T> output, std::function<void()> fn) {
    entries_.push_back({std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Reverse replay. Entries whose output never received a gradient are
  // unreachable from the loss and are skipped.
  void replay_reverse() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward();
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// Disables tape recording for its lifetime (inference).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_mode() { return detail::grad_mode_enabled; }

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor holds float or double");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const T> data() const { return node_->data; }
  /// Mutable access is reserved for leaves (parameter init, optimizer updates).
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) node_->ensure_grad();
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Copy of the values with no gradient participation.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  const detail::NodePtr<T>& node() const { return node_; }

 private:
  detail::NodePtr<T> node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode_enabled) return false;
  for (auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Wraps an op result; records `fn` on the tape when gradients flow.
// `fn` receives the output node and must accumulate into input grads.
template <typename T, typename Fn>
Tensor<T> finish(Tensor<T> out, std::initializer_list<const Tensor<T>*> inputs, Fn&& fn) {
  if (any_requires_grad<T>(inputs)) {
    out.node()->requires_grad = true;
    auto on = out.node();
    Tape<T>::current().record(on, [on, f = std::forward<Fn>(fn)]() mutable { f(*on); });
  }
  return out;
}

// Adds `g` into `t`'s gradient when `t` participates.
template <typename T>
inline T* grad_sink(const Tensor<T>& t) {
  if (!t.requires_grad()) return nullptr;
  t.node()->ensure_grad();
  return t.node()->grad.data();
}

template <typename T>
void require_finite(std::span<const T> values, const char* op) {
  for (T v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
}

}  // namespace detail

/// Replays the tape for a scalar loss, populating every reachable gradient,
/// then clears the tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ArgumentError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ArgumentError("backward() on a loss that depends on no grad-enabled tensor");
  auto& tape = Tape<T>::current();
  loss.node()->ensure_grad();
  loss.node()->grad[0] = T(1);
  tape.replay_reverse();
  tape.clear();
}

/// Named learnable tensor.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered parameter collection with unique names.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> tensor) {
    for (const auto& p : params_)
      if (p.name == name) throw ArgumentError("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(true);
    params_.push_back({name, tensor});
    return tensor;
  }

  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  Tensor<T> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    throw ArgumentError("no parameter named '" + name + "'");
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Param<T>> params_;
};

}  // namespace hsiseg
