#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a shared handle to a Node. Ops record their inputs and a
// backward closure when any input requires a gradient; node ids grow
// monotonically, so sorting reachable nodes by id yields a topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kpn/errors.hpp"

namespace kpn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Norms below this are treated as zero vectors by the cosine ops.
inline constexpr double kZeroNorm = 1e-12;

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::optional<std::uint64_t> tape_id;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

namespace detail {

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime. Used for
/// inference and for finite-difference probes.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    if (shape_size(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// In-place access, meant for leaf parameters (optimizer, finite differences).
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t i) const { return node_->value.at(i); }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has been accumulated yet.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  std::optional<std::uint64_t> tape_id() const { return node_->tape_id; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered op records reachable from a root; inputs precede outputs.
struct Tape {
  std::vector<std::shared_ptr<Node>> nodes;

  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<const Node*> seen;
    std::vector<std::shared_ptr<Node>> stack{root.node()};
    while (!stack.empty()) {
      auto node = std::move(stack.back());
      stack.pop_back();
      if (!node->tape_id || !seen.insert(node.get()).second) continue;
      for (const auto& in : node->inputs) stack.push_back(in);
      tape.nodes.push_back(std::move(node));
    }
    std::sort(tape.nodes.begin(), tape.nodes.end(),
              [](const auto& a, const auto& b) { return *a->tape_id < *b->tape_id; });
    return tape;
  }
};

/// Populates gradients of every leaf reachable from `loss`. Gradients add
/// onto whatever the leaves already hold.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw UsageError("backward() called on a tensor that is not on the tape");
  Tape tape = Tape::record(loss);
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    Node& node = **it;
    if (!node.grad.empty() && node.backward) node.backward(node);
  }
}

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = grad_enabled() &&
               std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->tape_id = next_tape_id();
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = grad_enabled() &&
               std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->tape_id = next_tape_id();
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

/// Gradient buffer of input `i`, or nullptr when it takes no gradient.
inline double* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* A = self.inputs[0]->value.data();
    const double* B = self.inputs[1]->value.data();
    const double* G = self.grad.data();
    if (double* dA = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          dA[i * k + p] += s;
        }
    }
    if (double* dB = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

/// x·W + b with b added to every row.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " + shape_str(w.shape()));
  }
  if (b.size() != out) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not fit weight " + shape_str(w.shape()));
  }
  std::vector<double> y(n * out);
  const double* X = x.data().data();
  const double* W = w.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* yrow = y.data() + i * out;
    std::copy(B, B + out, yrow);
    for (std::size_t p = 0; p < in; ++p) {
      const double xip = X[i * in + p];
      const double* wrow = W + p * out;
      for (std::size_t j = 0; j < out; ++j) yrow[j] += xip * wrow[j];
    }
  }
  return detail::make_result("linear", {n, out}, std::move(y), {x, w, b}, [n, in, out](Node& self) {
    const double* X = self.inputs[0]->value.data();
    const double* W = self.inputs[1]->value.data();
    const double* G = self.grad.data();
    if (double* dX = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < in; ++p) {
          double s = 0;
          for (std::size_t j = 0; j < out; ++j) s += G[i * out + j] * W[p * out + j];
          dX[i * in + p] += s;
        }
    }
    if (double* dW = detail::input_grad(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < in; ++p) {
          const double xip = X[i * in + p];
          for (std::size_t j = 0; j < out; ++j) dW[p * out + j] += xip * G[i * out + j];
        }
    }
    if (double* dB = detail::input_grad(self, 2)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) dB[j] += G[i * out + j];
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* d = detail::input_grad(self, 0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[i * n + j] += self.grad[j * m + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { relu, sigmoid, tanh, add, mul, sub, sub_from_one };

namespace detail {

inline Tensor unary(ElementwiseOp op, const Tensor& a) {
  std::vector<double> out(a.size());
  const auto in = a.data();
  const char* name = "";
  switch (op) {
    case ElementwiseOp::relu:
      name = "relu";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0 ? in[i] : 0.0;
      break;
    case ElementwiseOp::sigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(in[i]);
      break;
    case ElementwiseOp::tanh:
      name = "tanh";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
      break;
    case ElementwiseOp::sub_from_one:
      name = "sub_from_one";
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - in[i];
      break;
    default:
      throw UsageError("elementwise: binary op applied to one operand");
  }
  return make_result(name, a.shape(), std::move(out), {a}, [op](Node& self) {
    double* d = input_grad(self, 0);
    if (!d) return;
    const auto& x = self.inputs[0]->value;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (op) {
        case ElementwiseOp::relu: d[i] += x[i] > 0 ? g[i] : 0.0; break;
        case ElementwiseOp::sigmoid: d[i] += g[i] * y[i] * (1.0 - y[i]); break;
        case ElementwiseOp::tanh: d[i] += g[i] * (1.0 - y[i] * y[i]); break;
        case ElementwiseOp::sub_from_one: d[i] -= g[i]; break;
        default: break;
      }
    }
  });
}

inline Tensor binary(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  // Equal shapes, or one side a single value broadcast over the other.
  Shape shape;
  bool a_scalar = false, b_scalar = false;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (a.size() == 1) {
    shape = b.shape();
    a_scalar = true;
  } else if (b.size() == 1) {
    shape = a.shape();
    b_scalar = true;
  } else {
    throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = shape_size(shape);
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(n);
  const char* name = "";
  for (std::size_t i = 0; i < n; ++i) {
    double u = x[a_scalar ? 0 : i], v = y[b_scalar ? 0 : i];
    switch (op) {
      case ElementwiseOp::add: out[i] = u + v; name = "add"; break;
      case ElementwiseOp::sub: out[i] = u - v; name = "sub"; break;
      case ElementwiseOp::mul: out[i] = u * v; name = "mul"; break;
      default: throw UsageError("elementwise: unary op applied to two operands");
    }
  }
  return make_result(name, std::move(shape), std::move(out), {a, b}, [op, a_scalar, b_scalar](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    const auto& g = self.grad;
    double* da = input_grad(self, 0);
    double* db = input_grad(self, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const std::size_t ia = a_scalar ? 0 : i, ib = b_scalar ? 0 : i;
      switch (op) {
        case ElementwiseOp::add:
          if (da) da[ia] += g[i];
          if (db) db[ib] += g[i];
          break;
        case ElementwiseOp::sub:
          if (da) da[ia] += g[i];
          if (db) db[ib] -= g[i];
          break;
        case ElementwiseOp::mul:
          if (da) da[ia] += g[i] * y[ib];
          if (db) db[ib] += g[i] * x[ia];
          break;
        default: break;
      }
    }
  });
}

}  // namespace detail

inline Tensor elementwise(ElementwiseOp op, const Tensor& a) { return detail::unary(op, a); }
inline Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) { return detail::binary(op, a, b); }

inline Tensor relu(const Tensor& a) { return detail::unary(ElementwiseOp::relu, a); }
inline Tensor sigmoid(const Tensor& a) { return detail::unary(ElementwiseOp::sigmoid, a); }
inline Tensor tanh(const Tensor& a) { return detail::unary(ElementwiseOp::tanh, a); }
inline Tensor sub_from_one(const Tensor& a) { return detail::unary(ElementwiseOp::sub_from_one, a); }
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(ElementwiseOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(ElementwiseOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(ElementwiseOp::mul, a, b); }

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  return detail::make_result("scale", a.shape(), std::move(out), {a}, [c](Node& self) {
    if (double* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += c * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {a}, [](Node& self) {
    if (double* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) d[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

enum class PoolKind { max, mean };

/// Reduces `axis` away. Max routes its gradient to the first maximal entry.
inline Tensor pool(const Tensor& t, std::size_t axis, PoolKind kind) {
  if (axis >= t.rank()) {
    throw DomainError("pool: axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
  }
  const Shape& shape = t.shape();
  const std::size_t n = shape[axis];
  if (n == 0) throw DomainError("pool: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);
  if (out_shape.empty()) out_shape = {1};

  const auto x = t.data();
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? outer * inner : 0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      if (kind == PoolKind::max) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < n; ++k)
          if (x[base + k * inner] > x[base + best * inner]) best = k;
        out[o * inner + i] = x[base + best * inner];
        argmax[o * inner + i] = base + best * inner;
      } else {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) s += x[base + k * inner];
        out[o * inner + i] = s / static_cast<double>(n);
      }
    }
  }
  const char* name = kind == PoolKind::max ? "max_pool" : "mean_pool";
  return detail::make_result(
      name, std::move(out_shape), std::move(out), {t},
      [kind, n, outer, inner, argmax = std::move(argmax)](Node& self) {
        double* d = detail::input_grad(self, 0);
        if (!d) return;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const double g = self.grad[o * inner + i];
            if (kind == PoolKind::max) {
              d[argmax[o * inner + i]] += g;
            } else {
              const std::size_t base = o * n * inner + i;
              for (std::size_t k = 0; k < n; ++k) d[base + k * inner] += g / static_cast<double>(n);
            }
          }
      });
}

/// Numerically stable softmax over all entries.
inline Tensor softmax(const Tensor& v) {
  const auto x = v.data();
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double z = 0;
  for (std::size_t i = 0; i < x.size(); ++i) z += out[i] = std::exp(x[i] - mx);
  for (double& o : out) o /= z;
  return detail::make_result("softmax", v.shape(), std::move(out), {v}, [](Node& self) {
    double* d = detail::input_grad(self, 0);
    if (!d) return;
    const auto& s = self.value;
    const auto& g = self.grad;
    double dot = 0;
    for (std::size_t i = 0; i < s.size(); ++i) dot += g[i] * s[i];
    for (std::size_t i = 0; i < s.size(); ++i) d[i] += s[i] * (g[i] - dot);
  });
}

// ---------------------------------------------------------------------------
// Similarity

namespace detail {

// Accumulates d cos(a,b) / da and / db scaled by g. Zero vectors get nothing.
inline void cosine_grad(const double* a, const double* b, std::size_t d, double na, double nb, double c,
                        double g, double* da, double* db) {
  if (na < kZeroNorm || nb < kZeroNorm || g == 0.0) return;
  const double inv = 1.0 / (na * nb);
  if (da) {
    const double ka = c / (na * na);
    for (std::size_t i = 0; i < d; ++i) da[i] += g * (b[i] * inv - ka * a[i]);
  }
  if (db) {
    const double kb = c / (nb * nb);
    for (std::size_t i = 0; i < d; ++i) db[i] += g * (a[i] * inv - kb * b[i]);
  }
}

inline double norm(const double* a, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

}  // namespace detail

/// Cosine similarity of two equally sized tensors. Zero if either is ~0.
inline Tensor cosine(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine: lengths differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t d = a.size();
  const double na = detail::norm(a.data().data(), d), nb = detail::norm(b.data().data(), d);
  double c = 0;
  if (na >= kZeroNorm && nb >= kZeroNorm) {
    double dot = 0;
    for (std::size_t i = 0; i < d; ++i) dot += a.data()[i] * b.data()[i];
    c = dot / (na * nb);
  }
  return detail::make_result("cosine", {1}, {c}, {a, b}, [d, na, nb, c](Node& self) {
    detail::cosine_grad(self.inputs[0]->value.data(), self.inputs[1]->value.data(), d, na, nb, c,
                        self.grad[0], detail::input_grad(self, 0), detail::input_grad(self, 1));
  });
}

/// Pairwise row cosines: out[i][j] = cos(a_i, b_j) for a[n×d], b[m×d].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "cosine_matrix");
  detail::require_rank(b, 2, "cosine_matrix");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("cosine_matrix: row widths differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> na(n), nb(m), out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) na[i] = detail::norm(A + i * d, d);
  for (std::size_t j = 0; j < m; ++j) nb[j] = detail::norm(B + j * d, d);
  for (std::size_t i = 0; i < n; ++i) {
    if (na[i] < kZeroNorm) continue;
    for (std::size_t j = 0; j < m; ++j) {
      if (nb[j] < kZeroNorm) continue;
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += A[i * d + k] * B[j * d + k];
      out[i * m + j] = dot / (na[i] * nb[j]);
    }
  }
  return detail::make_result(
      "cosine_matrix", {n, m}, std::move(out), {a, b},
      [n, m, d, na = std::move(na), nb = std::move(nb)](Node& self) {
        const double* A = self.inputs[0]->value.data();
        const double* B = self.inputs[1]->value.data();
        double* dA = detail::input_grad(self, 0);
        double* dB = detail::input_grad(self, 1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            detail::cosine_grad(A + i * d, B + j * d, d, na[i], nb[j], self.value[i * m + j],
                                self.grad[i * m + j], dA ? dA + i * d : nullptr, dB ? dB + j * d : nullptr);
      });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

/// Flat concatenation into a vector.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.size());
  }
  const std::size_t total = out.size();
  return detail::make_result("concat", {total}, std::move(out), parts, [sizes = std::move(sizes)](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (double* d = detail::input_grad(self, k))
        for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += self.grad[off + i];
      off += sizes[k];
    }
  });
}

/// Stacks equally sized tensors as rows of a [k × n] matrix.
inline Tensor stack(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack: no inputs");
  const std::size_t n = rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != n) {
      throw DimensionError("stack: row sizes differ, " + shape_str(rows.front().shape()) + " vs " +
                           shape_str(r.shape()));
    }
  }
  Tensor flat = concat(rows);
  return reshape(flat, {rows.size(), n});
}

/// Vertical concatenation of matrices with equal widths.
inline Tensor concat_rows(const std::vector<Tensor>& blocks) {
  if (blocks.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t w = blocks.front().dim(1);
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    detail::require_rank(b, 2, "concat_rows");
    if (b.dim(1) != w) {
      throw DimensionError("concat_rows: widths differ, " + shape_str(blocks.front().shape()) + " vs " +
                           shape_str(b.shape()));
    }
    rows += b.dim(0);
  }
  return reshape(concat(blocks), {rows, w});
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_rank(a, 2, "slice_rows");
  if (begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t w = a.dim(1);
  std::vector<double> out(a.data().begin() + begin * w, a.data().begin() + end * w);
  return detail::make_result("slice_rows", {end - begin, w}, std::move(out), {a}, [begin, w](Node& self) {
    if (double* d = detail::input_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[begin * w + i] += self.grad[i];
  });
}

inline Tensor row(const Tensor& a, std::size_t i) { return reshape(slice_rows(a, i, i + 1), {a.dim(1)}); }

/// Single entry as a [1] tensor.
inline Tensor element(const Tensor& a, std::size_t i) {
  if (i >= a.size()) throw IndexError("element: index " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  return detail::make_result("element", {1}, {a.data()[i]}, {a}, [i](Node& self) {
    if (double* d = detail::input_grad(self, 0)) d[i] += self.grad[0];
  });
}

/// diag(v)·m: row i of m scaled by v[i].
inline Tensor scale_rows(const Tensor& m, const Tensor& v) {
  detail::require_rank(m, 2, "scale_rows");
  if (v.size() != m.dim(0)) {
    throw DimensionError("scale_rows: " + shape_str(v.shape()) + " does not match rows of " + shape_str(m.shape()));
  }
  const std::size_t n = m.dim(0), w = m.dim(1);
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = m.data()[i * w + j] * v.data()[i];
  return detail::make_result("scale_rows", m.shape(), std::move(out), {m, v}, [n, w](Node& self) {
    const auto& M = self.inputs[0]->value;
    const auto& V = self.inputs[1]->value;
    double* dM = detail::input_grad(self, 0);
    double* dV = detail::input_grad(self, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double g = self.grad[i * w + j];
        if (dM) dM[i * w + j] += g * V[i];
        if (dV) dV[i] += g * M[i * w + j];
      }
  });
}

/// Row lookup in table[V×d]. Id 0 is padding and always yields a zero row.
inline Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  detail::require_rank(table, 2, "gather_rows");
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d, 0.0);
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    if (ids[i] == 0) continue;
    std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
  }
  return detail::make_result("gather_rows", {ids.size(), d}, std::move(out), {table},
                             [d, kept = std::move(kept)](Node& self) {
                               double* dT = detail::input_grad(self, 0);
                               if (!dT) return;
                               for (std::size_t i = 0; i < kept.size(); ++i) {
                                 if (kept[i] == 0) continue;
                                 for (std::size_t j = 0; j < d; ++j) dT[kept[i] * d + j] += self.grad[i * d + j];
                               }
                             });
}

/// Places each [n_i × m_i] channel at the top-left of an H×W plane (zeros
/// elsewhere, excess cropped) and stacks the planes into [c × H × W].
inline Tensor pad_stack(const std::vector<Tensor>& channels, std::size_t height, std::size_t width) {
  if (channels.empty()) throw DimensionError("pad_stack: no channels");
  const std::size_t c = channels.size();
  std::vector<double> out(c * height * width, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    detail::require_rank(channels[k], 2, "pad_stack");
    const std::size_t n = std::min(channels[k].dim(0), height), m = std::min(channels[k].dim(1), width);
    const std::size_t src_w = channels[k].dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[(k * height + i) * width + j] = channels[k].data()[i * src_w + j];
  }
  return detail::make_result("pad_stack", {c, height, width}, std::move(out), channels, [c, height, width](Node& self) {
    for (std::size_t k = 0; k < c; ++k) {
      double* d = detail::input_grad(self, k);
      if (!d) continue;
      const Shape& s = self.inputs[k]->shape;
      const std::size_t n = std::min(s[0], height), m = std::min(s[1], width);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) d[i * s[1] + j] += self.grad[(k * height + i) * width + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution block: valid conv -> ReLU -> 2×2/stride-2 max-pool (partial
// windows at odd edges) -> flatten.

inline std::size_t conv_block_output_size(std::size_t filters, std::size_t height, std::size_t width,
                                          std::size_t kernel) {
  const std::size_t oh = height - kernel + 1, ow = width - kernel + 1;
  return filters * ((oh + 1) / 2) * ((ow + 1) / 2);
}

inline Tensor conv2d_block(const Tensor& input, const Tensor& filters, const Tensor& bias) {
  detail::require_rank(input, 3, "conv2d_block");
  detail::require_rank(filters, 4, "conv2d_block");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t f = filters.dim(0), kh = filters.dim(2), kw = filters.dim(3);
  if (filters.dim(1) != c) {
    throw DimensionError("conv2d_block: filters " + shape_str(filters.shape()) + " do not fit input " +
                         shape_str(input.shape()));
  }
  if (h < kh || w < kw) {
    throw DimensionError("conv2d_block: input " + shape_str(input.shape()) + " smaller than kernel " +
                         shape_str(filters.shape()));
  }
  if (bias.size() != f) throw DimensionError("conv2d_block: bias " + shape_str(bias.shape()) + " does not fit filters");
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;
  const std::size_t ph = (oh + 1) / 2, pw = (ow + 1) / 2;

  const double* X = input.data().data();
  const double* K = filters.data().data();
  const double* B = bias.data().data();
  // Outputs whose window lies entirely in the all-zero border equal the
  // bias, so the sums only run over the rows/columns that can see data.
  std::size_t rows = 0, cols = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (X[(ch * h + y) * w + x] != 0.0) {
          rows = std::max(rows, y + 1);
          cols = std::max(cols, x + 1);
        }
  const std::size_t zy = std::min(oh, rows), zx = std::min(ow, cols);
  std::vector<double> z(f * oh * ow);
  for (std::size_t q = 0; q < f; ++q) {
    double* zq = z.data() + q * oh * ow;
    std::fill(zq, zq + oh * ow, B[q]);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xc = X + ch * h * w;
      const double* kq = K + (q * c + ch) * kh * kw;
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double kv = kq[ky * kw + kx];
          for (std::size_t y = 0; y < zy; ++y) {
            const double* xr = xc + (y + ky) * w + kx;
            double* zr = zq + y * ow;
            for (std::size_t x = 0; x < zx; ++x) zr[x] += kv * xr[x];
          }
        }
    }
  }
  std::vector<double> out(f * ph * pw);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t q = 0; q < f; ++q)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px) {
        std::size_t best = q * oh * ow + (2 * py) * ow + 2 * px;
        double best_v = std::max(z[best], 0.0);
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * py + dy, x = 2 * px + dx;
            if (y >= oh || x >= ow) continue;
            const std::size_t idx = q * oh * ow + y * ow + x;
            const double v = std::max(z[idx], 0.0);
            if (v > best_v) {
              best_v = v;
              best = idx;
            }
          }
        const std::size_t o = (q * ph + py) * pw + px;
        out[o] = best_v;
        argmax[o] = best;
      }
  const std::size_t out_size = out.size();
  return detail::make_result(
      "conv2d_block", {out_size}, std::move(out), {input, filters, bias},
      [c, h, w, kh, kw, oh, ow, z = std::move(z), argmax = std::move(argmax)](Node& self) {
        // Only pooled maxima with a positive pre-activation carry gradient.
        const double* X = self.inputs[0]->value.data();
        const double* K = self.inputs[1]->value.data();
        double* dX = detail::input_grad(self, 0);
        double* dK = detail::input_grad(self, 1);
        double* dB = detail::input_grad(self, 2);
        for (std::size_t o = 0; o < argmax.size(); ++o) {
          const std::size_t idx = argmax[o];
          const double g = self.grad[o];
          if (!(z[idx] > 0) || g == 0.0) continue;
          const std::size_t q = idx / (oh * ow), y = (idx / ow) % oh, x = idx % ow;
          if (dB) dB[q] += g;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t kbase = (q * c + ch) * kh * kw;
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t xi = (ch * h + y + ky) * w + x + kx;
                if (dK) dK[kbase + ky * kw + kx] += g * X[xi];
                if (dX) dX[xi] += g * K[kbase + ky * kw + kx];
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// LSTM

/// Gate layout along the 4h axis: input, forget, cell candidate, output.
struct LstmWeights {
  Tensor w_x;  // [d_in × 4h]
  Tensor w_h;  // [h × 4h]
  Tensor b;    // [4h]
};

struct LstmOutput {
  Tensor hidden;  // [T × h]
  Tensor last;    // [h]
};

inline LstmOutput lstm_sequence(const Tensor& x, const LstmWeights& p) {
  detail::require_rank(x, 2, "lstm_sequence");
  const std::size_t T = x.dim(0), din = x.dim(1);
  if (T == 0) throw DomainError("lstm_sequence: empty sequence");
  detail::require_rank(p.w_x, 2, "lstm_sequence");
  detail::require_rank(p.w_h, 2, "lstm_sequence");
  const std::size_t H = p.w_h.dim(0), G = 4 * H;
  if (p.w_x.dim(0) != din || p.w_x.dim(1) != G || p.w_h.dim(1) != G || p.b.size() != G) {
    throw DimensionError("lstm_sequence: weights " + shape_str(p.w_x.shape()) + ", " + shape_str(p.w_h.shape()) +
                         ", " + shape_str(p.b.shape()) + " do not fit input " + shape_str(x.shape()));
  }
  const double* X = x.data().data();
  const double* Wx = p.w_x.data().data();
  const double* Wh = p.w_h.data().data();
  const double* Bv = p.b.data().data();

  // gates[t] holds activated i, f, g, o; cells[t] holds c_t; row -1 is zero.
  std::vector<double> gates(T * G), cells((T + 1) * H, 0.0), tanh_c(T * H), hs(T * H);
  std::vector<double> zt(G);
  for (std::size_t t = 0; t < T; ++t) {
    std::copy(Bv, Bv + G, zt.begin());
    for (std::size_t k = 0; k < din; ++k) {
      const double xv = X[t * din + k];
      if (xv == 0.0) continue;
      const double* wr = Wx + k * G;
      for (std::size_t j = 0; j < G; ++j) zt[j] += xv * wr[j];
    }
    if (t > 0) {
      for (std::size_t k = 0; k < H; ++k) {
        const double hv = hs[(t - 1) * H + k];
        const double* wr = Wh + k * G;
        for (std::size_t j = 0; j < G; ++j) zt[j] += hv * wr[j];
      }
    }
    double* gt = gates.data() + t * G;
    for (std::size_t j = 0; j < H; ++j) {
      gt[j] = detail::sigmoid(zt[j]);
      gt[H + j] = detail::sigmoid(zt[H + j]);
      gt[2 * H + j] = std::tanh(zt[2 * H + j]);
      gt[3 * H + j] = detail::sigmoid(zt[3 * H + j]);
      const double cprev = cells[t * H + j];
      const double cnew = gt[H + j] * cprev + gt[j] * gt[2 * H + j];
      cells[(t + 1) * H + j] = cnew;
      tanh_c[t * H + j] = std::tanh(cnew);
      hs[t * H + j] = gt[3 * H + j] * tanh_c[t * H + j];
    }
  }
  std::vector<double> hidden_vals = hs;
  Tensor hidden = detail::make_result(
      "lstm_sequence", {T, H}, std::move(hidden_vals), {x, p.w_x, p.w_h, p.b},
      [T, din, H, G, gates = std::move(gates), cells = std::move(cells), tanh_c = std::move(tanh_c)](Node& self) {
        const double* X = self.inputs[0]->value.data();
        const double* Wx = self.inputs[1]->value.data();
        const double* Wh = self.inputs[2]->value.data();
        const double* hs = self.value.data();
        double* dX = detail::input_grad(self, 0);
        double* dWx = detail::input_grad(self, 1);
        double* dWh = detail::input_grad(self, 2);
        double* dB = detail::input_grad(self, 3);
        std::vector<double> dh_next(H, 0.0), dc_next(H, 0.0), dz(G);
        for (std::size_t t = T; t-- > 0;) {
          const double* gt = gates.data() + t * G;
          for (std::size_t j = 0; j < H; ++j) {
            const double i = gt[j], f = gt[H + j], g = gt[2 * H + j], o = gt[3 * H + j];
            const double tc = tanh_c[t * H + j];
            const double dh = self.grad[t * H + j] + dh_next[j];
            const double dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * g * i * (1.0 - i);
            dz[H + j] = dc * cells[t * H + j] * f * (1.0 - f);
            dz[2 * H + j] = dc * i * (1.0 - g * g);
            dz[3 * H + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
          }
          if (dB)
            for (std::size_t j = 0; j < G; ++j) dB[j] += dz[j];
          for (std::size_t k = 0; k < din; ++k) {
            const double* wr = Wx + k * G;
            if (dX) {
              double s = 0;
              for (std::size_t j = 0; j < G; ++j) s += dz[j] * wr[j];
              dX[t * din + k] += s;
            }
            if (dWx) {
              const double xv = X[t * din + k];
              if (xv != 0.0)
                for (std::size_t j = 0; j < G; ++j) dWx[k * G + j] += xv * dz[j];
            }
          }
          for (std::size_t k = 0; k < H; ++k) {
            const double* wr = Wh + k * G;
            double s = 0;
            for (std::size_t j = 0; j < G; ++j) s += dz[j] * wr[j];
            dh_next[k] = s;
            if (dWh && t > 0) {
              const double hv = hs[(t - 1) * H + k];
              for (std::size_t j = 0; j < G; ++j) dWh[k * G + j] += hv * dz[j];
            }
          }
        }
      });
  Tensor last = row(hidden, T - 1);
  return {hidden, last};
}

// ---------------------------------------------------------------------------
// Losses

/// Mean of −[y log σ(z) + (1−y) log(1−σ(z))], computed as softplus(z) − y z.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  if (labels.size() != logits.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.size()) + " logits");
  }
  const auto z = logits.data();
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double sp = z[i] > 0 ? z[i] + std::log1p(std::exp(-z[i])) : std::log1p(std::exp(z[i]));
    total += sp - labels[i] * z[i];
  }
  const double n = static_cast<double>(z.size());
  std::vector<double> y(labels.begin(), labels.end());
  return detail::make_result("bce_with_logits", {1}, {total / n}, {logits}, [n, y = std::move(y)](Node& self) {
    double* d = detail::input_grad(self, 0);
    if (!d) return;
    const auto& z = self.inputs[0]->value;
    for (std::size_t i = 0; i < z.size(); ++i) d[i] += self.grad[0] * (detail::sigmoid(z[i]) - y[i]) / n;
  });
}

/// Probabilities are clamped to [1e-12, 1 − 1e-12] before taking logs.
inline constexpr double kProbClamp = 1e-12;

/// Mean binary cross-entropy over entries whose mask is set.
inline Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> labels,
                                   std::span<const std::uint8_t> mask) {
  if (labels.size() != probs.size() || mask.size() != probs.size()) {
    throw DimensionError("binary_cross_entropy: sizes differ (" + std::to_string(probs.size()) + " scores, " +
                         std::to_string(labels.size()) + " labels, " + std::to_string(mask.size()) + " mask)");
  }
  const auto s = probs.data();
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!mask[i]) continue;
    if (!(s[i] >= 0.0 && s[i] <= 1.0)) {
      throw DomainError("binary_cross_entropy: score " + std::to_string(s[i]) + " at " + std::to_string(i) +
                        " is not a probability");
    }
    const double p = std::clamp(s[i], kProbClamp, 1.0 - kProbClamp);
    total -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
    ++count;
  }
  if (count == 0) throw DomainError("binary_cross_entropy: mask selects nothing");
  const double n = static_cast<double>(count);
  std::vector<double> y(labels.begin(), labels.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return detail::make_result(
      "binary_cross_entropy", {1}, {total / n}, {probs}, [n, y = std::move(y), mk = std::move(mk)](Node& self) {
        double* d = detail::input_grad(self, 0);
        if (!d) return;
        const auto& s = self.inputs[0]->value;
        for (std::size_t i = 0; i < s.size(); ++i) {
          if (!mk[i]) continue;
          const double p = std::clamp(s[i], kProbClamp, 1.0 - kProbClamp);
          d[i] += self.grad[0] * (-(y[i] / p) + (1.0 - y[i]) / (1.0 - p)) / n;
        }
      });
}

}  // namespace kpn
