// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fgmoe {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
namespace {
thread_local std::uint64_t g_seq = 0;
thread_local bool g_grad_enabled = true;
thread_local bool g_check_finite = false;
}  // namespace

std::uint64_t next_seq() { return ++g_seq; }
}  // namespace detail

bool grad_enabled() { return detail::g_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = previous_; }

bool finite_check_enabled() { return detail::g_check_finite; }
FiniteCheckGuard::FiniteCheckGuard() : previous_(detail::g_check_finite) {
  detail::g_check_finite = true;
}
FiniteCheckGuard::~FiniteCheckGuard() { detail::g_check_finite = previous_; }

namespace {

using detail::Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> new_node(Shape shape, std::vector<T> value, bool requires_grad, const char* op) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->seq = detail::next_seq();
  node->op = op;
  return node;
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> backward) {
  if (detail::g_check_finite) {
    for (T v : value) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(op) + ": non-finite value in result of shape " +
                           shape_str(shape));
      }
    }
  }
  bool needs_grad = false;
  if (detail::g_grad_enabled) {
    for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  }
  auto node = new_node<T>(std::move(shape), std::move(value), needs_grad, op);
  if (needs_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank, const char* op) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

// --- broadcasting -----------------------------------------------------------

enum class BcastKind { same, scalar, suffix, general };

struct BcastOperand {
  BcastKind kind = BcastKind::same;
  std::size_t n = 0;
  std::vector<std::size_t> table;

  std::size_t index(std::size_t i) const {
    switch (kind) {
      case BcastKind::same: return i;
      case BcastKind::scalar: return 0;
      case BcastKind::suffix: return i % n;
      default: return table[i];
    }
  }
};

BcastOperand plan_operand(const Shape& in, const Shape& out) {
  BcastOperand op;
  op.n = numel(in);
  if (in == out) return op;
  if (op.n == 1) {
    op.kind = BcastKind::scalar;
    return op;
  }
  // Strip leading unit axes, then check whether `in` is a trailing block.
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  const std::size_t k = in.size() - lead;
  if (k <= out.size() &&
      std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                 out.end() - static_cast<std::ptrdiff_t>(k))) {
    op.kind = BcastKind::suffix;
    return op;
  }
  op.kind = BcastKind::general;
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    stride[i + offset] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t total = numel(out);
  op.table.resize(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < total; ++i) {
    op.table[i] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      pos += stride[d];
      if (idx[d] < out[d]) break;
      pos -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return op;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

enum class BinOp { add, sub, mul, div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* name) {
  Shape out = broadcast_shape(a.shape(), b.shape(), name);
  auto pa = std::make_shared<BcastOperand>(plan_operand(a.shape(), out));
  auto pb = std::make_shared<BcastOperand>(plan_operand(b.shape(), out));
  const std::size_t n = numel(out);
  std::vector<T> value(n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  if (pa->kind == BcastKind::same && pb->kind == BcastKind::same) {
    switch (kind) {
      case BinOp::add: for (std::size_t i = 0; i < n; ++i) value[i] = av[i] + bv[i]; break;
      case BinOp::sub: for (std::size_t i = 0; i < n; ++i) value[i] = av[i] - bv[i]; break;
      case BinOp::mul: for (std::size_t i = 0; i < n; ++i) value[i] = av[i] * bv[i]; break;
      case BinOp::div: for (std::size_t i = 0; i < n; ++i) value[i] = av[i] / bv[i]; break;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const T x = av[pa->index(i)];
      const T y = bv[pb->index(i)];
      switch (kind) {
        case BinOp::add: value[i] = x + y; break;
        case BinOp::sub: value[i] = x - y; break;
        case BinOp::mul: value[i] = x * y; break;
        case BinOp::div: value[i] = x / y; break;
      }
    }
  }
  return make_result<T>(name, out, std::move(value), {a.node(), b.node()},
                        [kind, pa, pb, n](Node<T>& self) {
                          Node<T>& na = *self.inputs[0];
                          Node<T>& nb = *self.inputs[1];
                          const T* g = self.grad.data();
                          const T* av = na.value.data();
                          const T* bv = nb.value.data();
                          if (na.requires_grad) {
                            T* ga = na.grad_buffer().data();
                            for (std::size_t i = 0; i < n; ++i) {
                              const std::size_t ia = pa->index(i);
                              switch (kind) {
                                case BinOp::add:
                                case BinOp::sub: ga[ia] += g[i]; break;
                                case BinOp::mul: ga[ia] += g[i] * bv[pb->index(i)]; break;
                                case BinOp::div: ga[ia] += g[i] / bv[pb->index(i)]; break;
                              }
                            }
                          }
                          if (nb.requires_grad) {
                            T* gb = nb.grad_buffer().data();
                            for (std::size_t i = 0; i < n; ++i) {
                              const std::size_t ib = pb->index(i);
                              switch (kind) {
                                case BinOp::add: gb[ib] += g[i]; break;
                                case BinOp::sub: gb[ib] -= g[i]; break;
                                case BinOp::mul: gb[ib] += g[i] * av[pa->index(i)]; break;
                                case BinOp::div: {
                                  const T y = bv[ib];
                                  gb[ib] -= g[i] * av[pa->index(i)] / (y * y);
                                  break;
                                }
                              }
                            }
                          }
                        });
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& a, const char* name, F forward,
                std::function<void(Node<T>&)> backward) {
  std::vector<T> value(a.size());
  const auto in = a.data();
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = forward(in[i]);
  return make_result<T>(name, a.shape(), std::move(value), {a.node()}, std::move(backward));
}

constexpr double kGeluC = 0.7978845608;
constexpr double kGeluA = 0.044715;

}  // namespace

// --- Tensor members ---------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> v(numel(shape), value);
  return Tensor(new_node<T>(std::move(shape), std::move(v), requires_grad, "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  return Tensor(new_node<T>(std::move(shape), std::move(values), requires_grad, "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return full(Shape{}, value, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::ptrdiff_t axis) const {
  return node_->shape[norm_axis(axis, rank(), "dim")];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t i = 0;
  for (std::size_t v : index) {
    if (v >= node_->shape[i]) throw ShapeError("at: index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->value[flat];
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw ShapeError("backward: root must be a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  std::vector<Node<T>*> order;
  std::vector<Node<T>*> stack{node_.get()};
  std::unordered_set<const Node<T>*> seen;
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && !seen.contains(in.get())) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* x, const Node<T>* y) { return x->seq > y->seq; });
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->grad.assign(n->value.size(), T(0));
    } else {
      n->grad_buffer();
    }
  }
  node_->grad[0] += T(1);
  for (Node<T>* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// --- elementwise ------------------------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::add, "add"); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::sub, "sub"); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::mul, "mul"); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::div, "div"); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(a, "scale", [factor](T x) { return x * factor; }, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary<T>(a, "add_scalar", [offset](T x) { return x + offset; }, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, "exp", [](T x) { return std::exp(x); }, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("log: empty tensor");
  return unary<T>(a, "log", [](T x) { return std::log(x); }, [](Node<T>& self) {
    const auto& x = self.inputs[0]->value;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / x[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](Node<T>& self) {
    const auto& x = self.inputs[0]->value;
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = T(kGeluC);
  const T k = T(kGeluA);
  return unary<T>(
      a, "gelu",
      [c, k](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [c, k](Node<T>& self) {
        const auto& xs = self.inputs[0]->value;
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = xs[i];
          const T t = std::tanh(c * (x + k * x * x * x));
          const T dt = (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
          g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * dt);
        }
      });
}

// --- linear algebra ---------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.shape()[0]) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t k = b.shape()[0];
  const std::size_t p = b.shape()[1];
  const std::size_t n = a.size() / k;
  Shape out = a.shape();
  out.back() = p;
  std::vector<T> value(n * p);
  {
    MMap<T> c(value.data(), n, p);
    c.noalias() = CMap<T>(a.data().data(), n, k) * CMap<T>(b.data().data(), k, p);
  }
  return make_result<T>("matmul", std::move(out), std::move(value), {a.node(), b.node()},
                        [n, k, p](Node<T>& self) {
                          Node<T>& na = *self.inputs[0];
                          Node<T>& nb = *self.inputs[1];
                          CMap<T> g(self.grad.data(), n, p);
                          if (na.requires_grad) {
                            MMap<T> ga(na.grad_buffer().data(), n, k);
                            ga.noalias() += g * CMap<T>(nb.value.data(), k, p).transpose();
                          }
                          if (nb.requires_grad) {
                            MMap<T> gb(nb.grad_buffer().data(), k, p);
                            gb.noalias() += CMap<T>(na.value.data(), n, k).transpose() * g;
                          }
                        });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1]) {
    throw ShapeError("bmm: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t batch = a.shape()[0], n = a.shape()[1], k = a.shape()[2], p = b.shape()[2];
  std::vector<T> value(batch * n * p);
  for (std::size_t i = 0; i < batch; ++i) {
    MMap<T> c(value.data() + i * n * p, n, p);
    c.noalias() = CMap<T>(a.data().data() + i * n * k, n, k) *
                  CMap<T>(b.data().data() + i * k * p, k, p);
  }
  return make_result<T>("bmm", Shape{batch, n, p}, std::move(value), {a.node(), b.node()},
                        [batch, n, k, p](Node<T>& self) {
                          Node<T>& na = *self.inputs[0];
                          Node<T>& nb = *self.inputs[1];
                          for (std::size_t i = 0; i < batch; ++i) {
                            CMap<T> g(self.grad.data() + i * n * p, n, p);
                            if (na.requires_grad) {
                              MMap<T> ga(na.grad_buffer().data() + i * n * k, n, k);
                              ga.noalias() += g * CMap<T>(nb.value.data() + i * k * p, k, p).transpose();
                            }
                            if (nb.requires_grad) {
                              MMap<T> gb(nb.grad_buffer().data() + i * k * p, k, p);
                              gb.noalias() += CMap<T>(na.value.data() + i * n * k, n, k).transpose() * g;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& order) {
  const Shape& in = a.shape();
  const std::size_t rank = in.size();
  std::vector<bool> used(rank, false);
  if (order.size() != rank) {
    throw ShapeError("permute: order of length " + std::to_string(order.size()) +
                     " for shape " + shape_str(in));
  }
  for (std::size_t o : order) {
    if (o >= rank || used[o]) throw ShapeError("permute: invalid axis order for " + shape_str(in));
    used[o] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[order[i]];
    stride[i] = in_stride[order[i]];
  }
  // src[i] is the input offset of output element i.
  const std::size_t total = a.size();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < total; ++i) {
    (*src)[i] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      pos += stride[d];
      if (idx[d] < out[d]) break;
      pos -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> value(total);
  const auto av = a.data();
  for (std::size_t i = 0; i < total; ++i) value[i] = av[(*src)[i]];
  return make_result<T>("permute", std::move(out), std::move(value), {a.node()},
                        [src](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < src->size(); ++i) g[(*src)[i]] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[a.rank() - 1], order[a.rank() - 2]);
  return permute(a, order);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> value(a.data().begin(), a.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(value), {a.node()},
                        [](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
}

// --- reductions -------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& a, std::ptrdiff_t axis, bool keepdim, bool average,
                      const char* name) {
  const std::size_t ax = norm_axis(axis, a.rank(), name);
  const AxisSplit s = split_at(a.shape(), ax);
  if (average && s.len == 0) throw ShapeError(std::string(name) + ": empty axis in " + shape_str(a.shape()));
  Shape out = a.shape();
  if (keepdim) {
    out[ax] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const T factor = average ? T(1) / T(s.len) : T(1);
  std::vector<T> value(s.outer * s.inner, T(0));
  const T* av = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      T acc = T(0);
      for (std::size_t l = 0; l < s.len; ++l) acc += av[(o * s.len + l) * s.inner + i];
      value[o * s.inner + i] = average ? acc * factor : acc;
    }
  }
  return make_result<T>(name, std::move(out), std::move(value), {a.node()},
                        [s, factor](Node<T>& self) {
                          T* g = self.inputs[0]->grad_buffer().data();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            for (std::size_t l = 0; l < s.len; ++l) {
                              for (std::size_t i = 0; i < s.inner; ++i) {
                                g[(o * s.len + l) * s.inner + i] += self.grad[o * s.inner + i] * factor;
                              }
                            }
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& a, std::ptrdiff_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, false, "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, std::ptrdiff_t axis, bool keepdim) {
  return reduce_axis(a, axis, keepdim, true, "mean");
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  return reduce_axis(reshape(a, Shape{a.size()}), 0, false, false, "sum");
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return reduce_axis(reshape(a, Shape{a.size()}), 0, false, true, "mean");
}

// --- normalizations ---------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::ptrdiff_t axis) {
  const std::size_t ax = norm_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  if (s.len == 0) throw ShapeError("softmax: empty axis in " + shape_str(a.shape()));
  std::vector<T> value(a.size());
  const T* av = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = av[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(av[base + l * s.inner] - mx);
        value[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) value[base + l * s.inner] /= total;
    }
  }
  return make_result<T>("softmax", a.shape(), std::move(value), {a.node()}, [s](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    const T* y = self.value.data();
    const T* gy = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          dot += gy[j] * y[j];
        }
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          g[j] += y[j] * (gy[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::ptrdiff_t axis) {
  const std::size_t ax = norm_axis(axis, a.rank(), "log_softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  if (s.len == 0) throw ShapeError("log_softmax: empty axis in " + shape_str(a.shape()));
  std::vector<T> value(a.size());
  const T* av = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = av[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(av[base + l * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) value[base + l * s.inner] = av[base + l * s.inner] - lse;
    }
  }
  return make_result<T>("log_softmax", a.shape(), std::move(value), {a.node()}, [s](Node<T>& self) {
    T* g = self.inputs[0]->grad_buffer().data();
    const T* y = self.value.data();
    const T* gy = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T total = T(0);
        for (std::size_t l = 0; l < s.len; ++l) total += gy[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t j = base + l * s.inner;
          g[j] += gy[j] - std::exp(y[j]) * total;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() < 1 || x.shape().back() == 0) {
    throw ShapeError("layer_norm: empty last axis in " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> value(x.size());
  const T* xv = x.data().data();
  const T* gv = gain.data().data();
  const T* bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      value[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(value),
                        {x.node(), gain.node(), bias.node()},
                        [rows, d, xhat, rstd](Node<T>& self) {
                          Node<T>& nx = *self.inputs[0];
                          Node<T>& ng = *self.inputs[1];
                          Node<T>& nb = *self.inputs[2];
                          const T* gy = self.grad.data();
                          const T* gain = ng.value.data();
                          if (ng.requires_grad || nb.requires_grad) {
                            T* gg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
                            T* gbias = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < d; ++j) {
                                if (gg) gg[j] += gy[r * d + j] * (*xhat)[r * d + j];
                                if (gbias) gbias[j] += gy[r * d + j];
                              }
                            }
                          }
                          if (nx.requires_grad) {
                            T* gx = nx.grad_buffer().data();
                            for (std::size_t r = 0; r < rows; ++r) {
                              T mean_dh = T(0), mean_dhh = T(0);
                              for (std::size_t j = 0; j < d; ++j) {
                                const T dh = gy[r * d + j] * gain[j];
                                mean_dh += dh;
                                mean_dhh += dh * (*xhat)[r * d + j];
                              }
                              mean_dh /= T(d);
                              mean_dhh /= T(d);
                              for (std::size_t j = 0; j < d; ++j) {
                                const T dh = gy[r * d + j] * gain[j];
                                gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dhh);
                              }
                            }
                          }
                        });
}

// --- structural -------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = norm_axis(axis, first.size(), "concat");
  std::vector<std::size_t> lens;
  std::size_t total_len = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == first[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    lens.push_back(s[ax]);
    total_len += s[ax];
  }
  Shape out = first;
  out[ax] = total_len;
  const AxisSplit s = split_at(out, ax);
  std::vector<T> value(numel(out));
  std::vector<NodePtr<T>> inputs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* pv = parts[k].data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv + o * lens[k] * s.inner, lens[k] * s.inner,
                  value.begin() + static_cast<std::ptrdiff_t>((o * total_len + offset) * s.inner));
    }
    offset += lens[k];
    inputs.push_back(parts[k].node());
  }
  return make_result<T>("concat", std::move(out), std::move(value), std::move(inputs),
                        [s, lens, total_len](Node<T>& self) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < lens.size(); ++k) {
                            Node<T>& in = *self.inputs[k];
                            if (in.requires_grad) {
                              T* g = in.grad_buffer().data();
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                const T* src = self.grad.data() + (o * total_len + offset) * s.inner;
                                T* dst = g + o * lens[k] * s.inner;
                                for (std::size_t i = 0; i < lens[k] * s.inner; ++i) dst[i] += src[i];
                              }
                            }
                            offset += lens[k];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::ptrdiff_t axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, a.rank(), "slice");
  const AxisSplit s = split_at(a.shape(), ax);
  if (begin > end || end > s.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of bounds for axis " + std::to_string(ax) + " of " + shape_str(a.shape()));
  }
  const std::size_t len = end - begin;
  Shape out = a.shape();
  out[ax] = len;
  std::vector<T> value(numel(out));
  const T* av = a.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av + (o * s.len + begin) * s.inner, len * s.inner,
                value.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  }
  return make_result<T>("slice", std::move(out), std::move(value), {a.node()},
                        [s, begin, len](Node<T>& self) {
                          T* g = self.inputs[0]->grad_buffer().data();
                          for (std::size_t o = 0; o < s.outer; ++o) {
                            const T* src = self.grad.data() + o * len * s.inner;
                            T* dst = g + (o * s.len + begin) * s.inner;
                            for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                          }
                        });
}

template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  std::vector<T> value(a.data().begin(), a.data().end());
  return Tensor<T>(new_node<T>(a.shape(), std::move(value), false, "detach"));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> value(a.size());
  for (std::size_t i = 0; i < value.size(); ++i) value[i] = static_cast<To>(a.data()[i]);
  return Tensor<To>::from(a.shape(), std::move(value));
}

#define FGMOE_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);          \
  template Tensor<T> transpose(const Tensor<T>&);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                    \
  template Tensor<T> sum(const Tensor<T>&, std::ptrdiff_t, bool);                         \
  template Tensor<T> mean(const Tensor<T>&, std::ptrdiff_t, bool);                        \
  template Tensor<T> sum_all(const Tensor<T>&);                                           \
  template Tensor<T> mean_all(const Tensor<T>&);                                          \
  template Tensor<T> exp(const Tensor<T>&);                                               \
  template Tensor<T> log(const Tensor<T>&);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                              \
  template Tensor<T> gelu(const Tensor<T>&);                                              \
  template Tensor<T> softmax(const Tensor<T>&, std::ptrdiff_t);                           \
  template Tensor<T> log_softmax(const Tensor<T>&, std::ptrdiff_t);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::ptrdiff_t);               \
  template Tensor<T> slice(const Tensor<T>&, std::ptrdiff_t, std::size_t, std::size_t);   \
  template Tensor<T> detach(const Tensor<T>&);

FGMOE_INSTANTIATE(float)
FGMOE_INSTANTIATE(double)
#undef FGMOE_INSTANTIATE

template Tensor<float> cast(const Tensor<double>&);
template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace fgmoe
