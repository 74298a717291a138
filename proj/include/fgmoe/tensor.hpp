// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a reverse-mode gradient tape.
//
// Every primitive records a backward rule on the node it produces. Calling
// backward() on a scalar result visits all reachable nodes in reverse
// creation order, which is a valid topological order because a node can only
// consume nodes created before it. Gradients are therefore accumulated in a
// fixed order and are bitwise reproducible for identical inputs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fgmoe {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or infinity is produced while finite checking is on.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Lazily sized gradient buffer.
  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

std::uint64_t next_seq();

}  // namespace detail

/// True while operations record backward rules (the default).
bool grad_enabled();

/// Disables gradient recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, every op result is scanned and a NumericError naming the op
/// is thrown on the first non-finite value.
class FiniteCheckGuard {
 public:
  FiniteCheckGuard();
  ~FiniteCheckGuard();
  FiniteCheckGuard(const FiniteCheckGuard&) = delete;
  FiniteCheckGuard& operator=(const FiniteCheckGuard&) = delete;

 private:
  bool previous_;
};

bool finite_check_enabled();

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> data() const { return node_->value; }
  // Direct write access is reserved for leaves (parameter updates, finite
  // difference perturbation); ops never mutate their inputs.
  std::span<T> mutable_data() { return node_->value; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  /// Seeds d(this)/d(this) = 1 and propagates to every reachable leaf.
  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// --- primitives -------------------------------------------------------------
//
// Binary elementwise ops broadcast numpy-style (right-aligned, extent 1
// stretches). Axis arguments accept negative values counted from the end.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);

/// [..., n, k] x [k, p] -> [..., n, p]; leading axes of `a` are rows.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// [b, n, k] x [b, k, p] -> [b, n, p]
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T> Tensor<T> sum(const Tensor<T>& a, std::ptrdiff_t axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& a, std::ptrdiff_t axis, bool keepdim = false);
template <typename T> Tensor<T> sum_all(const Tensor<T>& a);
template <typename T> Tensor<T> mean_all(const Tensor<T>& a);

template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
/// tanh approximation: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::ptrdiff_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a, std::ptrdiff_t axis);
/// Normalizes over the last axis, then applies per-channel gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6));

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::ptrdiff_t axis, std::size_t begin, std::size_t end);
/// Same values, no gradient path.
template <typename T> Tensor<T> detach(const Tensor<T>& a);

/// Converts between precisions without a gradient path.
template <typename To, typename From> Tensor<To> cast(const Tensor<From>& a);

}  // namespace fgmoe
