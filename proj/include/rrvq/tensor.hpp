#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace rrvq {

using Shape = std::vector<int>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated on demand during backward
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

inline NodePtr new_node(Shape shape, const char* op, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val.resize(shape_numel(n->shape));
  n->op = op;
  for (auto& p : parents)
    if (p && p->requires_grad) n->requires_grad = true;
  n->parents = std::move(parents);
  return n;
}

}  // namespace detail

/// Dense row-major tensor participating in a reverse-mode graph. Value
/// semantics: copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->val.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->val; }
  /// Direct mutation is reserved for leaves (parameters); mutating an
  /// interior node would desynchronize the recorded graph.
  std::vector<double>& leaf_values() {
    if (!node_->parents.empty())
      throw Error("leaf_values() called on non-leaf node produced by op '" +
                  std::string(node_->op) + "'");
    return node_->val;
  }
  double value() const {
    if (size() != 1) throw ShapeError("value() on non-scalar tensor " + shape_str(shape()));
    return node_->val[0];
  }
  double operator[](std::size_t i) const { return node_->val[i]; }

  const std::vector<double>& grad() const {
    const_cast<detail::Node*>(node_.get())->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  bool all_finite() const {
    for (double v : node_->val)
      if (!std::isfinite(v)) return false;
    return true;
  }

  detail::NodePtr node() const { return node_; }

 private:
  detail::NodePtr node_;
};

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss. Each reachable node is
/// visited exactly once, in reverse topological order; fan-out accumulates
/// additively into parent gradients.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw Error("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) n->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  check_same_shape(op, a, b);
  auto out = new_node(a.shape(), op, {a.node(), b.node()});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = fwd(av[i], bv[i]);
  if (out->requires_grad) {
    Node* pa = a.node().get();
    Node* pb = b.node().get();
    out->backprop = [pa, pb, bwd](Node& n) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::size_t i = 0; i < n.val.size(); ++i) {
        auto [da, db] = bwd(pa->val[i], pb->val[i], n.val[i]);
        if (pa->requires_grad) pa->grad[i] += n.grad[i] * da;
        if (pb->requires_grad) pb->grad[i] += n.grad[i] * db;
      }
    };
  }
  return Tensor(out);
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  auto out = new_node(a.shape(), op, {a.node()});
  const auto& av = a.values();
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = fwd(av[i]);
  if (out->requires_grad) {
    Node* pa = a.node().get();
    out->backprop = [pa, bwd](Node& n) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.val.size(); ++i)
        pa->grad[i] += n.grad[i] * bwd(pa->val[i], n.val[i]);
    };
  }
  return Tensor(out);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double) {
        return std::pair<double, double>{1.0 / y, -x / (y * y)};
      });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor mul_scalar(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }
inline Tensor exp(const Tensor& a) {
  return detail::unary_elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary_elementwise(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary_elementwise(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor elu(const Tensor& a) {
  // alpha = 1
  return detail::unary_elementwise(
      "elu", a, [](double x) { return x >= 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x >= 0.0 ? 1.0 : y + 1.0; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_elementwise(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor max_scalar(const Tensor& a, double c) {
  // Gradient passes through on the unclamped side, including at equality.
  return detail::unary_elementwise(
      "max_scalar", a, [c](double x) { return x > c ? x : c; },
      [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}
inline Tensor min_scalar(const Tensor& a, double c) {
  return detail::unary_elementwise(
      "min_scalar", a, [c](double x) { return x < c ? x : c; },
      [c](double x, double) { return x <= c ? 1.0 : 0.0; });
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return min_scalar(max_scalar(a, lo), hi);
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Reductions and axis ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  auto out = detail::new_node({1}, "sum", {a.node()});
  out->val[0] = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa](detail::Node& n) {
      pa->ensure_grad();
      for (double& g : pa->grad) g += n.grad[0];
    };
  }
  return Tensor(out);
}
inline Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit axis_split(const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit a{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) a.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    a.inner *= static_cast<std::size_t>(s[i]);
  return a;
}

inline Shape drop_axis(const Shape& s, int axis) {
  Shape r;
  for (int i = 0; i < static_cast<int>(s.size()); ++i)
    if (i != axis) r.push_back(s[static_cast<std::size_t>(i)]);
  if (r.empty()) r.push_back(1);
  return r;
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, int axis) {
  auto sp = detail::axis_split(a.shape(), axis);
  auto out = detail::new_node(detail::drop_axis(a.shape(), axis), "sum_axis", {a.node()});
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) acc += av[(o * sp.len + k) * sp.inner + i];
      out->val[o * sp.inner + i] = acc;
    }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa, sp](detail::Node& n) {
      pa->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double g = n.grad[o * sp.inner + i];
          for (std::size_t k = 0; k < sp.len; ++k) pa->grad[(o * sp.len + k) * sp.inner + i] += g;
        }
    };
  }
  return Tensor(out);
}

inline Tensor log_sum_exp(const Tensor& a, int axis) {
  auto sp = detail::axis_split(a.shape(), axis);
  auto out = detail::new_node(detail::drop_axis(a.shape(), axis), "log_sum_exp", {a.node()});
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k)
        m = std::max(m, av[(o * sp.len + k) * sp.inner + i]);
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) acc += std::exp(av[(o * sp.len + k) * sp.inner + i] - m);
      out->val[o * sp.inner + i] = m + std::log(acc);
    }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa, sp](detail::Node& n) {
      pa->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double lse = n.val[o * sp.inner + i];
          double g = n.grad[o * sp.inner + i];
          for (std::size_t k = 0; k < sp.len; ++k) {
            std::size_t idx = (o * sp.len + k) * sp.inner + i;
            pa->grad[idx] += g * std::exp(pa->val[idx] - lse);
          }
        }
    };
  }
  return Tensor(out);
}

inline Tensor softmax(const Tensor& a, int axis) {
  auto sp = detail::axis_split(a.shape(), axis);
  auto out = detail::new_node(a.shape(), "softmax", {a.node()});
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k)
        m = std::max(m, av[(o * sp.len + k) * sp.inner + i]);
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        std::size_t idx = (o * sp.len + k) * sp.inner + i;
        out->val[idx] = std::exp(av[idx] - m);
        acc += out->val[idx];
      }
      for (std::size_t k = 0; k < sp.len; ++k) out->val[(o * sp.len + k) * sp.inner + i] /= acc;
    }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa, sp](detail::Node& n) {
      pa->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double dot = 0.0;
          for (std::size_t k = 0; k < sp.len; ++k) {
            std::size_t idx = (o * sp.len + k) * sp.inner + i;
            dot += n.grad[idx] * n.val[idx];
          }
          for (std::size_t k = 0; k < sp.len; ++k) {
            std::size_t idx = (o * sp.len + k) * sp.inner + i;
            pa->grad[idx] += n.val[idx] * (n.grad[idx] - dot);
          }
        }
    };
  }
  return Tensor(out);
}

inline Tensor log_softmax(const Tensor& a, int axis) {
  auto sp = detail::axis_split(a.shape(), axis);
  auto out = detail::new_node(a.shape(), "log_softmax", {a.node()});
  const auto& av = a.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k)
        m = std::max(m, av[(o * sp.len + k) * sp.inner + i]);
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) acc += std::exp(av[(o * sp.len + k) * sp.inner + i] - m);
      double lse = m + std::log(acc);
      for (std::size_t k = 0; k < sp.len; ++k) {
        std::size_t idx = (o * sp.len + k) * sp.inner + i;
        out->val[idx] = av[idx] - lse;
      }
    }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa, sp](detail::Node& n) {
      pa->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double gsum = 0.0;
          for (std::size_t k = 0; k < sp.len; ++k) gsum += n.grad[(o * sp.len + k) * sp.inner + i];
          for (std::size_t k = 0; k < sp.len; ++k) {
            std::size_t idx = (o * sp.len + k) * sp.inner + i;
            pa->grad[idx] += n.grad[idx] - std::exp(n.val[idx]) * gsum;
          }
        }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto out = detail::new_node(std::move(shape), "reshape", {a.node()});
  out->val = a.values();
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa](detail::Node& n) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n.val.size(); ++i) pa->grad[i] += n.grad[i];
    };
  }
  return Tensor(out);
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3))
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  auto out = detail::new_node({N, Ca + Cb, H, W}, "concat_channels", {a.node(), b.node()});
  std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.values().begin() + n * Ca * hw, Ca * hw, out->val.begin() + n * (Ca + Cb) * hw);
    std::copy_n(b.values().begin() + n * Cb * hw, Cb * hw,
                out->val.begin() + (n * (Ca + Cb) + Ca) * hw);
  }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    detail::Node* pb = b.node().get();
    out->backprop = [pa, pb, N, Ca, Cb, hw](detail::Node& n) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int b_ = 0; b_ < N; ++b_) {
        if (pa->requires_grad)
          for (std::size_t i = 0; i < Ca * hw; ++i)
            pa->grad[b_ * Ca * hw + i] += n.grad[b_ * (Ca + Cb) * hw + i];
        if (pb->requires_grad)
          for (std::size_t i = 0; i < Cb * hw; ++i)
            pb->grad[b_ * Cb * hw + i] += n.grad[(b_ * (Ca + Cb) + Ca) * hw + i];
      }
    };
  }
  return Tensor(out);
}

/// [N,C,H,W] -> [N*H*W, C] rows, position-major. Inverse of rows_to_nchw.
inline Tensor nchw_to_rows(const Tensor& a) {
  if (a.rank() != 4) throw ShapeError("nchw_to_rows: need rank-4 input, got " + shape_str(a.shape()));
  int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  auto out = detail::new_node({N * H * W, C}, "nchw_to_rows", {a.node()});
  const auto& av = a.values();
  std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        out->val[(n * hw + p) * C + c] = av[(n * C + c) * hw + p];
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    out->backprop = [pa, N, C, hw](detail::Node& n) {
      pa->ensure_grad();
      for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c)
          for (std::size_t p = 0; p < hw; ++p)
            pa->grad[(b * C + c) * hw + p] += n.grad[(b * hw + p) * C + c];
    };
  }
  return Tensor(out);
}

inline Tensor rows_to_nchw(const Tensor& rows, int N, int C, int H, int W) {
  if (rows.rank() != 2 || rows.dim(0) != N * H * W || rows.dim(1) != C)
    throw ShapeError("rows_to_nchw: rows " + shape_str(rows.shape()) + " do not match [" +
                     std::to_string(N) + "," + std::to_string(C) + "," + std::to_string(H) + "," +
                     std::to_string(W) + "]");
  auto out = detail::new_node({N, C, H, W}, "rows_to_nchw", {rows.node()});
  const auto& rv = rows.values();
  std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        out->val[(n * C + c) * hw + p] = rv[(n * hw + p) * C + c];
  if (out->requires_grad) {
    detail::Node* pr = rows.node().get();
    out->backprop = [pr, N, C, hw](detail::Node& n) {
      pr->ensure_grad();
      for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c)
          for (std::size_t p = 0; p < hw; ++p)
            pr->grad[(b * hw + p) * C + c] += n.grad[(b * C + c) * hw + p];
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  auto out = detail::new_node({M, N}, "matmul", {a.node(), b.node()});
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) {
      double x = av[i * K + k];
      for (int j = 0; j < N; ++j) out->val[i * N + j] += x * bv[k * N + j];
    }
  if (out->requires_grad) {
    detail::Node* pa = a.node().get();
    detail::Node* pb = b.node().get();
    out->backprop = [pa, pb, M, K, N](detail::Node& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) {
            double g = n.grad[i * N + j];
            for (int k = 0; k < K; ++k) pa->grad[i * K + k] += g * pb->val[k * N + j];
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            double x = pa->val[i * K + k];
            for (int j = 0; j < N; ++j) pb->grad[k * N + j] += x * n.grad[i * N + j];
          }
      }
    };
  }
  return Tensor(out);
}

/// rows [M,K] * w [K,N] + bias [N]; bias addition is part of the primitive.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.rank() != 1 ||
      b.dim(0) != w.dim(1))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()) + " + " + shape_str(b.shape()));
  int M = x.dim(0), K = x.dim(1), N = w.dim(1);
  auto out = detail::new_node({M, N}, "linear", {x.node(), w.node(), b.node()});
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) out->val[i * N + j] = bv[j];
    for (int k = 0; k < K; ++k) {
      double v = xv[i * K + k];
      for (int j = 0; j < N; ++j) out->val[i * N + j] += v * wv[k * N + j];
    }
  }
  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    detail::Node* pw = w.node().get();
    detail::Node* pb = b.node().get();
    out->backprop = [px, pw, pb, M, K, N](detail::Node& n) {
      if (px->requires_grad) {
        px->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) {
            double g = n.grad[i * N + j];
            for (int k = 0; k < K; ++k) px->grad[i * K + k] += g * pw->val[k * N + j];
          }
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int k = 0; k < K; ++k) {
            double v = px->val[i * K + k];
            for (int j = 0; j < N; ++j) pw->grad[k * N + j] += v * n.grad[i * N + j];
          }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) pb->grad[j] += n.grad[i * N + j];
      }
    };
  }
  return Tensor(out);
}

/// Selects rows of a [K,d] matrix; differentiable w.r.t. the matrix.
inline Tensor gather_rows(const Tensor& m, const std::vector<int>& idx) {
  if (m.rank() != 2) throw ShapeError("gather_rows: need matrix, got " + shape_str(m.shape()));
  int K = m.dim(0), D = m.dim(1);
  for (int i : idx)
    if (i < 0 || i >= K) throw Error("gather_rows: index " + std::to_string(i) + " out of range");
  auto out = detail::new_node({static_cast<int>(idx.size()), D}, "gather_rows", {m.node()});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(m.values().begin() + idx[r] * D, D, out->val.begin() + r * D);
  if (out->requires_grad) {
    detail::Node* pm = m.node().get();
    out->backprop = [pm, idx, D](detail::Node& n) {
      pm->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (int d = 0; d < D; ++d) pm->grad[idx[r] * D + d] += n.grad[r * D + d];
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int pad) {
  int num = in + 2 * pad - k;
  if (num < 0)
    throw ShapeError("conv2d: extent " + std::to_string(in) + " smaller than kernel " +
                     std::to_string(k) + " at pad " + std::to_string(pad));
  return num / stride + 1;
}

}  // namespace detail

/// x [N,Ci,H,W] * w [Co,Ci,kh,kw] (+ bias [Co]) with zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  if (stride < 1) throw Error("conv2d: stride must be >= 1");
  int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co))
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match Co=" +
                     std::to_string(Co));
  int Ho = detail::conv_out_extent(H, kh, stride, pad);
  int Wo = detail::conv_out_extent(W, kw, stride, pad);

  std::vector<detail::NodePtr> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto out = detail::new_node({N, Co, Ho, Wo}, "conv2d", std::move(parents));

  const auto& xv = x.values();
  const auto& wv = w.values();
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co) {
      double b0 = bias.defined() ? bias.values()[co] : 0.0;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = b0;
          for (int ci = 0; ci < Ci; ++ci)
            for (int i = 0; i < kh; ++i) {
              int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              for (int j = 0; j < kw; ++j) {
                int iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                acc += xv[((n * Ci + ci) * H + ih) * W + iw] * wv[((co * Ci + ci) * kh + i) * kw + j];
              }
            }
          out->val[((n * Co + co) * Ho + oh) * Wo + ow] = acc;
        }
    }

  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    detail::Node* pw = w.node().get();
    detail::Node* pb = bias.defined() ? bias.node().get() : nullptr;
    out->backprop = [px, pw, pb, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](detail::Node& n) {
      if (px->requires_grad) px->ensure_grad();
      if (pw->requires_grad) pw->ensure_grad();
      if (pb && pb->requires_grad) pb->ensure_grad();
      for (int b = 0; b < N; ++b)
        for (int co = 0; co < Co; ++co)
          for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow) {
              double g = n.grad[((b * Co + co) * Ho + oh) * Wo + ow];
              if (g == 0.0) continue;
              if (pb && pb->requires_grad) pb->grad[co] += g;
              for (int ci = 0; ci < Ci; ++ci)
                for (int i = 0; i < kh; ++i) {
                  int ih = oh * stride - pad + i;
                  if (ih < 0 || ih >= H) continue;
                  for (int j = 0; j < kw; ++j) {
                    int iw = ow * stride - pad + j;
                    if (iw < 0 || iw >= W) continue;
                    std::size_t xi = ((b * Ci + ci) * H + ih) * W + iw;
                    std::size_t wi = ((co * Ci + ci) * kh + i) * kw + j;
                    if (px->requires_grad) px->grad[xi] += g * pw->val[wi];
                    if (pw->requires_grad) pw->grad[wi] += g * px->val[xi];
                  }
                }
            }
    };
  }
  return Tensor(out);
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

/// Exact adjoint of conv2d with the same weight layout [Co,Ci,kh,kw]: maps
/// [N,Co,Ho,Wo] back to [N,Ci,out_h,out_w] so that
/// <conv2d(a,w), b> == <a, conv2d_transpose(b,w)> for matching geometry.
inline Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                               int pad, int out_h, int out_w) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(0))
    throw ShapeError("conv2d_transpose: incompatible shapes " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  if (stride < 1) throw Error("conv2d_transpose: stride must be >= 1");
  int N = x.dim(0), Co = x.dim(1), Ho = x.dim(2), Wo = x.dim(3);
  int Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (detail::conv_out_extent(out_h, kh, stride, pad) != Ho ||
      detail::conv_out_extent(out_w, kw, stride, pad) != Wo)
    throw ShapeError("conv2d_transpose: target " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " inconsistent with input " + shape_str(x.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Ci))
    throw ShapeError("conv2d_transpose: bias " + shape_str(bias.shape()) +
                     " does not match Ci=" + std::to_string(Ci));

  std::vector<detail::NodePtr> parents = {x.node(), w.node()};
  if (bias.defined()) parents.push_back(bias.node());
  auto out = detail::new_node({N, Ci, out_h, out_w}, "conv2d_transpose", std::move(parents));

  const auto& xv = x.values();
  const auto& wv = w.values();
  if (bias.defined())
    for (int n = 0; n < N; ++n)
      for (int ci = 0; ci < Ci; ++ci)
        std::fill_n(out->val.begin() + ((n * Ci + ci) * out_h) * out_w,
                    static_cast<std::size_t>(out_h) * out_w, bias.values()[ci]);
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double v = xv[((n * Co + co) * Ho + oh) * Wo + ow];
          if (v == 0.0) continue;
          for (int ci = 0; ci < Ci; ++ci)
            for (int i = 0; i < kh; ++i) {
              int ih = oh * stride - pad + i;
              if (ih < 0 || ih >= out_h) continue;
              for (int j = 0; j < kw; ++j) {
                int iw = ow * stride - pad + j;
                if (iw < 0 || iw >= out_w) continue;
                out->val[((n * Ci + ci) * out_h + ih) * out_w + iw] +=
                    v * wv[((co * Ci + ci) * kh + i) * kw + j];
              }
            }
        }

  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    detail::Node* pw = w.node().get();
    detail::Node* pb = bias.defined() ? bias.node().get() : nullptr;
    out->backprop = [px, pw, pb, N, Ci, Co, kh, kw, Ho, Wo, out_h, out_w, stride,
                     pad](detail::Node& n) {
      if (px->requires_grad) px->ensure_grad();
      if (pw->requires_grad) pw->ensure_grad();
      if (pb && pb->requires_grad) pb->ensure_grad();
      if (pb && pb->requires_grad)
        for (int b = 0; b < N; ++b)
          for (int ci = 0; ci < Ci; ++ci)
            for (int p = 0; p < out_h * out_w; ++p)
              pb->grad[ci] += n.grad[((b * Ci + ci) * out_h) * out_w + p];
      for (int b = 0; b < N; ++b)
        for (int co = 0; co < Co; ++co)
          for (int oh = 0; oh < Ho; ++oh)
            for (int ow = 0; ow < Wo; ++ow) {
              std::size_t xi = ((b * Co + co) * Ho + oh) * Wo + ow;
              double acc = 0.0;
              for (int ci = 0; ci < Ci; ++ci)
                for (int i = 0; i < kh; ++i) {
                  int ih = oh * stride - pad + i;
                  if (ih < 0 || ih >= out_h) continue;
                  for (int j = 0; j < kw; ++j) {
                    int iw = ow * stride - pad + j;
                    if (iw < 0 || iw >= out_w) continue;
                    std::size_t oi = ((b * Ci + ci) * out_h + ih) * out_w + iw;
                    std::size_t wi = ((co * Ci + ci) * kh + i) * kw + j;
                    acc += n.grad[oi] * pw->val[wi];
                    if (pw->requires_grad) pw->grad[wi] += n.grad[oi] * px->val[xi];
                  }
                }
              if (px->requires_grad) px->grad[xi] += acc;
            }
    };
  }
  return Tensor(out);
}

inline Tensor conv2d_transpose(const Tensor& x, const Tensor& w, int stride, int pad, int out_h,
                               int out_w) {
  return conv2d_transpose(x, w, Tensor(), stride, pad, out_h, out_w);
}

/// Tiles a batch-1 tensor n times along the leading axis.
inline Tensor repeat_batch(const Tensor& x, int n) {
  if (x.rank() < 1 || x.dim(0) != 1)
    throw ShapeError("repeat_batch: need leading extent 1, got " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[0] = n;
  auto out = detail::new_node(std::move(shape), "repeat_batch", {x.node()});
  std::size_t sz = x.size();
  for (int i = 0; i < n; ++i) std::copy_n(x.values().begin(), sz, out->val.begin() + i * sz);
  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    out->backprop = [px, n, sz](detail::Node& nd) {
      px->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < sz; ++j) px->grad[j] += nd.grad[i * sz + j];
    };
  }
  return Tensor(out);
}

/// Nearest-neighbour rescaling of the spatial extents of [N,C,H,W].
inline Tensor nearest_rescale(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 4) throw ShapeError("nearest_rescale: need rank-4 input, got " + shape_str(x.shape()));
  if (out_h < 1 || out_w < 1) throw Error("nearest_rescale: target extents must be positive");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = detail::new_node({N, C, out_h, out_w}, "nearest_rescale", {x.node()});
  const auto& xv = x.values();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < out_h; ++i) {
        int si = static_cast<int>((static_cast<long long>(i) * H) / out_h);
        for (int j = 0; j < out_w; ++j) {
          int sj = static_cast<int>((static_cast<long long>(j) * W) / out_w);
          out->val[((n * C + c) * out_h + i) * out_w + j] = xv[((n * C + c) * H + si) * W + sj];
        }
      }
  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    out->backprop = [px, N, C, H, W, out_h, out_w](detail::Node& n) {
      px->ensure_grad();
      for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < out_h; ++i) {
            int si = static_cast<int>((static_cast<long long>(i) * H) / out_h);
            for (int j = 0; j < out_w; ++j) {
              int sj = static_cast<int>((static_cast<long long>(j) * W) / out_w);
              px->grad[((b * C + c) * H + si) * W + sj] +=
                  n.grad[((b * C + c) * out_h + i) * out_w + j];
            }
          }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Quantisation-specific primitives
// ---------------------------------------------------------------------------

/// Squared Euclidean distances between rows of e [M,d] and rows of c [K,d],
/// giving [M,K].
inline Tensor pairwise_sq_dist(const Tensor& e, const Tensor& c) {
  if (e.rank() != 2 || c.rank() != 2 || e.dim(1) != c.dim(1))
    throw ShapeError("pairwise_sq_dist: incompatible shapes " + shape_str(e.shape()) + " vs " +
                     shape_str(c.shape()));
  int M = e.dim(0), D = e.dim(1), K = c.dim(0);
  auto out = detail::new_node({M, K}, "pairwise_sq_dist", {e.node(), c.node()});
  const auto& ev = e.values();
  const auto& cv = c.values();
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        double t = ev[m * D + d] - cv[k * D + d];
        acc += t * t;
      }
      out->val[m * K + k] = acc;
    }
  if (out->requires_grad) {
    detail::Node* pe = e.node().get();
    detail::Node* pc = c.node().get();
    out->backprop = [pe, pc, M, D, K](detail::Node& n) {
      if (pe->requires_grad) pe->ensure_grad();
      if (pc->requires_grad) pc->ensure_grad();
      for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
          double g = 2.0 * n.grad[m * K + k];
          if (g == 0.0) continue;
          for (int d = 0; d < D; ++d) {
            double t = pe->val[m * D + d] - pc->val[k * D + d];
            if (pe->requires_grad) pe->grad[m * D + d] += g * t;
            if (pc->requires_grad) pc->grad[k * D + d] -= g * t;
          }
        }
    };
  }
  return Tensor(out);
}

/// Log density of each row of e [M,d] under K diagonal Gaussians with means
/// mu [K,d] and log variances lv ([K,d], or [K,1] for one shared value per
/// component); output [M,K].
inline Tensor pairwise_gaussian_logpdf(const Tensor& e, const Tensor& mu, const Tensor& lv) {
  if (e.rank() != 2 || mu.rank() != 2 || e.dim(1) != mu.dim(1))
    throw ShapeError("pairwise_gaussian_logpdf: incompatible shapes " + shape_str(e.shape()) +
                     " vs " + shape_str(mu.shape()));
  int M = e.dim(0), D = e.dim(1), K = mu.dim(0);
  bool shared = (lv.rank() == 2 && lv.dim(0) == K && lv.dim(1) == 1);
  if (!shared && !(lv.rank() == 2 && lv.dim(0) == K && lv.dim(1) == D))
    throw ShapeError("pairwise_gaussian_logpdf: log-variance shape " + shape_str(lv.shape()) +
                     " must be [K,d] or [K,1]");
  constexpr double kLog2Pi = 1.8378770664093454836;
  auto out = detail::new_node({M, K}, "pairwise_gaussian_logpdf", {e.node(), mu.node(), lv.node()});
  const auto& ev = e.values();
  const auto& mv = mu.values();
  const auto& vv = lv.values();
  for (int m = 0; m < M; ++m)
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        double l = shared ? vv[k] : vv[k * D + d];
        double t = ev[m * D + d] - mv[k * D + d];
        acc += t * t * std::exp(-l) + l + kLog2Pi;
      }
      out->val[m * K + k] = -0.5 * acc;
    }
  if (out->requires_grad) {
    detail::Node* pe = e.node().get();
    detail::Node* pm = mu.node().get();
    detail::Node* pv = lv.node().get();
    out->backprop = [pe, pm, pv, M, D, K, shared](detail::Node& n) {
      if (pe->requires_grad) pe->ensure_grad();
      if (pm->requires_grad) pm->ensure_grad();
      if (pv->requires_grad) pv->ensure_grad();
      for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k) {
          double g = n.grad[m * K + k];
          if (g == 0.0) continue;
          for (int d = 0; d < D; ++d) {
            double l = shared ? pv->val[k] : pv->val[k * D + d];
            double t = pe->val[m * D + d] - pm->val[k * D + d];
            double inv = std::exp(-l);
            if (pe->requires_grad) pe->grad[m * D + d] += g * (-t * inv);
            if (pm->requires_grad) pm->grad[k * D + d] += g * (t * inv);
            if (pv->requires_grad) {
              double dl = -0.5 * (1.0 - t * t * inv);
              pv->grad[shared ? k : k * D + d] += g * dl;
            }
          }
        }
    };
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Custom op hook (used by tests and one-off primitives)
// ---------------------------------------------------------------------------

/// Builds a unary op from explicit forward/vjp callables. vjp receives the
/// input values, output values and upstream gradient and must return the
/// gradient w.r.t. the input.
inline Tensor custom_unary(
    const Tensor& x, const char* name, Shape out_shape,
    const std::function<std::vector<double>(const std::vector<double>&)>& fwd,
    const std::function<std::vector<double>(const std::vector<double>&, const std::vector<double>&,
                                            const std::vector<double>&)>& vjp) {
  auto out = detail::new_node(std::move(out_shape), name, {x.node()});
  out->val = fwd(x.values());
  if (out->val.size() != shape_numel(out->shape))
    throw ShapeError(std::string(name) + ": forward produced wrong element count");
  if (out->requires_grad) {
    detail::Node* px = x.node().get();
    out->backprop = [px, vjp](detail::Node& n) {
      px->ensure_grad();
      auto gx = vjp(px->val, n.val, n.grad);
      if (gx.size() != px->grad.size())
        throw Error("custom_unary: vjp produced wrong element count");
      for (std::size_t i = 0; i < gx.size(); ++i) px->grad[i] += gx[i];
    };
  }
  return Tensor(out);
}

}  // namespace rrvq
