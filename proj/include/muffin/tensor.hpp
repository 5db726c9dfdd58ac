#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "muffin/errors.hpp"

// Dense f64 tensors with dynamic tape-based reverse-mode autodiff.
// Storage is row-major and contiguous; there are no views or strides, and
// broadcasting is limited to the few patterns the models need (row vectors,
// scalars). Every op builds a fresh node, so the graph mirrors one forward
// pass exactly.

namespace muffin {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Scratch gradients for one backward traversal. Persistent grads on the
// nodes only receive the final sums, so repeated backward calls accumulate
// without double-counting interior contributions.
struct BackwardScratch {
  std::unordered_map<const Node*, std::vector<double>> grads;
  std::vector<double>& at(const Node& n);
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Adds this node's scratch gradient into its parents' scratch buffers.
  std::function<void(const std::vector<double>&, BackwardScratch&)> backprop;

  std::size_t numel() const { return value.size(); }
  bool is_leaf() const { return parents.empty(); }
};

inline std::vector<double>& BackwardScratch::at(const Node& n) {
  auto it = grads.find(&n);
  if (it == grads.end())
    it = grads.emplace(&n, std::vector<double>(n.numel(), 0.0)).first;
  return it->second;
}

// NaN/Inf guard on every produced forward value. Enabled in debug builds and
// wherever MUFFIN_ENABLE_FINITE_CHECKS is defined (the test suites turn it
// on explicitly even in optimized builds).
#if defined(MUFFIN_ENABLE_FINITE_CHECKS) || !defined(NDEBUG)
inline constexpr bool kFiniteChecks = true;
#else
inline constexpr bool kFiniteChecks = false;
#endif

inline void check_finite(const Node& n) {
  if constexpr (kFiniteChecks) {
    for (double v : n.value) {
      if (!std::isfinite(v))
        throw ContractError(std::string("non-finite value produced by op '") +
                            n.op + "'");
    }
  }
}

inline NodePtr make_node(Shape shape, std::vector<double> value, const char* op,
                         std::vector<NodePtr> parents) {
  if (shape_numel(shape) != value.size())
    throw ShapeError(std::string("node '") + op + "': shape " +
                     shape_str(shape) + " does not match buffer size " +
                     std::to_string(value.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  check_finite(*n);
  return n;
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false) {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
    auto n = detail::make_node(std::move(shape), std::move(data), "leaf", {});
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> d(shape_numel(shape));
    for (double& x : d) x = dist(rng);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }

  std::size_t rows() const {
    require_2d("rows");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_2d("cols");
    return node_->shape[1];
  }

  double item() const {
    if (numel() != 1)
      throw ContractError("item(): tensor is not scalar, shape " +
                          shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t i) const { return node_->value.at(i); }
  double operator()(std::size_t r, std::size_t c) const {
    require_2d("operator()");
    return node_->value[r * node_->shape[1] + c];
  }

  std::span<const double> data() const { return node_->value; }

  // Leaf-only raw access, used by the optimizer and the finite-difference
  // oracle. Interior nodes are immutable after the forward pass.
  std::vector<double>& mutable_data() {
    if (!node_->is_leaf())
      throw ContractError("mutable_data(): only leaf tensors may be mutated");
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->is_leaf())
      throw ContractError("set_requires_grad(): only valid on leaf tensors");
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const {
    if (!has_grad())
      throw ContractError("grad(): gradient absent; run backward first");
    return node_->grad;
  }
  std::vector<double>& mutable_grad() {
    if (!has_grad()) throw ContractError("mutable_grad(): gradient absent");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  detail::NodePtr node() const { return node_; }

 private:
  void require_2d(const char* who) const {
    if (node_->shape.size() != 2)
      throw ShapeError(std::string(who) + ": tensor is not 2-D, shape " +
                       shape_str(node_->shape));
  }
  detail::NodePtr node_;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  auto n = detail::make_node(a.shape(), std::move(out), "add",
                             {a.node(), b.node()});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    n->backprop = [an, bn](const std::vector<double>& g,
                           detail::BackwardScratch& s) {
      if (an->requires_grad) {
        auto& da = s.at(*an);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& db = s.at(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  auto n = detail::make_node(a.shape(), std::move(out), "sub",
                             {a.node(), b.node()});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    n->backprop = [an, bn](const std::vector<double>& g,
                           detail::BackwardScratch& s) {
      if (an->requires_grad) {
        auto& da = s.at(*an);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (bn->requires_grad) {
        auto& db = s.at(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  auto n = detail::make_node(a.shape(), std::move(out), "mul",
                             {a.node(), b.node()});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    n->backprop = [an, bn](const std::vector<double>& g,
                           detail::BackwardScratch& s) {
      if (an->requires_grad) {
        auto& da = s.at(*an);
        for (std::size_t i = 0; i < g.size(); ++i)
          da[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& db = s.at(*bn);
        for (std::size_t i = 0; i < g.size(); ++i)
          db[i] += g[i] * an->value[i];
      }
    };
  }
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
  auto n = detail::make_node(a.shape(), std::move(out), "scale", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, c](const std::vector<double>& g,
                          detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
    };
  }
  return Tensor(n);
}

/// a[m×n] + v[n] broadcast over rows (bias add).
inline Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  if (a.shape().size() != 2 || v.shape().size() != 1 ||
      a.shape()[1] != v.shape()[0])
    throw ShapeError("add_row_vector: shapes " + shape_str(a.shape()) +
                     " and " + shape_str(v.shape()));
  const std::size_t m = a.rows(), nn = a.cols();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j)
      out[i * nn + j] = a.at(i * nn + j) + v.at(j);
  auto n = detail::make_node(a.shape(), std::move(out), "add_row_vector",
                             {a.node(), v.node()});
  if (n->requires_grad) {
    auto an = a.node(), vn = v.node();
    n->backprop = [an, vn, m, nn](const std::vector<double>& g,
                                  detail::BackwardScratch& s) {
      if (an->requires_grad) {
        auto& da = s.at(*an);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (vn->requires_grad) {
        auto& dv = s.at(*vn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) dv[j] += g[i * nn + j];
      }
    };
  }
  return Tensor(n);
}

/// Smooth GELU, exact erf form. Chosen over ReLU so every activation is
/// differentiable everywhere and finite-difference checks stay clean.
inline Tensor gelu(const Tensor& a) {
  static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.at(i);
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  auto n = detail::make_node(a.shape(), std::move(out), "gelu", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](const std::vector<double>& g,
                       detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = an->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        da[i] += g[i] * (cdf + x * pdf);
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
  std::vector<double> out(m * nn, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a.at(i * k + kk);
      if (aik == 0.0) continue;
      const double* brow = &b.data()[kk * nn];
      double* orow = &out[i * nn];
      for (std::size_t j = 0; j < nn; ++j) orow[j] += aik * brow[j];
    }
  }
  auto n = detail::make_node({m, nn}, std::move(out), "matmul",
                             {a.node(), b.node()});
  if (n->requires_grad) {
    auto an = a.node(), bn = b.node();
    n->backprop = [an, bn, m, k, nn](const std::vector<double>& g,
                                     detail::BackwardScratch& s) {
      if (an->requires_grad) {
        // dA = dC · Bᵀ
        auto& da = s.at(*an);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = &g[i * nn];
            const double* brow = &bn->value[kk * nn];
            for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
            da[i * k + kk] += acc;
          }
      }
      if (bn->requires_grad) {
        // dB = Aᵀ · dC
        auto& db = s.at(*bn);
        for (std::size_t kk = 0; kk < k; ++kk)
          for (std::size_t i = 0; i < m; ++i) {
            const double aik = an->value[i * k + kk];
            if (aik == 0.0) continue;
            const double* grow = &g[i * nn];
            double* drow = &db[kk * nn];
            for (std::size_t j = 0; j < nn; ++j) drow[j] += aik * grow[j];
          }
      }
    };
  }
  return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose: tensor is not 2-D, shape " +
                     shape_str(a.shape()));
  const std::size_t m = a.rows(), nn = a.cols();
  std::vector<double> out(m * nn);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < nn; ++j) out[j * m + i] = a.at(i * nn + j);
  auto n = detail::make_node({nn, m}, std::move(out), "transpose", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, m, nn](const std::vector<double>& g,
                              detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nn; ++j) da[i * nn + j] += g[j * m + i];
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.at(i);
  auto n = detail::make_node({1}, {acc}, "sum", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](const std::vector<double>& g,
                       detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (double& d : da) d += g[0];
    };
  }
  return Tensor(n);
}

/// Row-wise softmax with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("softmax_rows: tensor is not 2-D, shape " +
                     shape_str(a.shape()));
  const std::size_t m = a.rows(), nn = a.cols();
  std::vector<double> out(m * nn);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = a.at(i * nn);
    for (std::size_t j = 1; j < nn; ++j) mx = std::max(mx, a.at(i * nn + j));
    double denom = 0.0;
    for (std::size_t j = 0; j < nn; ++j) {
      const double e = std::exp(a.at(i * nn + j) - mx);
      out[i * nn + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < nn; ++j) out[i * nn + j] /= denom;
  }
  auto n =
      detail::make_node(a.shape(), std::move(out), "softmax_rows", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    std::vector<double> y = n->value;
    n->backprop = [an, y = std::move(y), m, nn](
                      const std::vector<double>& g,
                      detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < nn; ++j)
          dot += g[i * nn + j] * y[i * nn + j];
        for (std::size_t j = 0; j < nn; ++j)
          da[i * nn + j] += y[i * nn + j] * (g[i * nn + j] - dot);
      }
    };
  }
  return Tensor(n);
}

/// Per-last-axis normalization with affine gamma/beta. x is treated as
/// [rows × d] where d is the last dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps) {
  if (x.shape().empty())
    throw ShapeError("layer_norm: input has no dimensions");
  const std::size_t d = x.shape().back();
  if (d < 1) throw ShapeError("layer_norm: last axis must be >= 1");
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw ShapeError("layer_norm: gamma/beta must be [d]=" +
                     std::to_string(d) + ", got " + shape_str(gamma.shape()) +
                     " and " + shape_str(beta.shape()));
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x.data()[r * d];
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = gamma.at(j) * xh + beta.at(j);
    }
  }
  auto n = detail::make_node(x.shape(), std::move(out), "layer_norm",
                             {x.node(), gamma.node(), beta.node()});
  if (n->requires_grad) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    n->backprop = [xn, gn, bn, xhat = std::move(xhat),
                   inv_std = std::move(inv_std), rows,
                   d](const std::vector<double>& g,
                      detail::BackwardScratch& s) {
      if (gn->requires_grad) {
        auto& dg = s.at(*gn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j)
            dg[j] += g[r * d + j] * xhat[r * d + j];
      }
      if (bn->requires_grad) {
        auto& db = s.at(*bn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) db[j] += g[r * d + j];
      }
      if (xn->requires_grad) {
        auto& dx = s.at(*xn);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_h = 0.0, mean_hx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double h = g[r * d + j] * gn->value[j];
            mean_h += h;
            mean_hx += h * xhat[r * d + j];
          }
          mean_h /= static_cast<double>(d);
          mean_hx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double h = g[r * d + j] * gn->value[j];
            dx[r * d + j] +=
                (h - mean_h - xhat[r * d + j] * mean_hx) * inv_std[r];
          }
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t len) {
  if (a.shape().size() != 2)
    throw ShapeError("slice_rows: tensor is not 2-D");
  const std::size_t m = a.rows(), nn = a.cols();
  if (r0 + len > m)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " +
                     std::to_string(r0 + len) + ") exceeds " +
                     std::to_string(m) + " rows");
  std::vector<double> out(len * nn);
  std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * nn),
              len * nn, out.begin());
  auto n =
      detail::make_node({len, nn}, std::move(out), "slice_rows", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, r0, nn](const std::vector<double>& g,
                               detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < g.size(); ++i) da[r0 * nn + i] += g[i];
    };
  }
  return Tensor(n);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no tensors given");
  const std::size_t nn = parts[0].cols();
  std::size_t m = 0;
  std::vector<detail::NodePtr> parents;
  for (const auto& p : parts) {
    if (p.cols() != nn)
      throw ShapeError("concat_rows: column mismatch " +
                       shape_str(p.shape()));
    m += p.rows();
    parents.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(m * nn);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  auto n = detail::make_node({m, nn}, std::move(out), "concat_rows",
                             std::move(parents));
  if (n->requires_grad) {
    auto parents_copy = n->parents;
    n->backprop = [parents_copy](const std::vector<double>& g,
                                 detail::BackwardScratch& s) {
      std::size_t off = 0;
      for (const auto& p : parents_copy) {
        if (p->requires_grad) {
          auto& dp = s.at(*p);
          for (std::size_t i = 0; i < p->numel(); ++i) dp[i] += g[off + i];
        }
        off += p->numel();
      }
    };
  }
  return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t len) {
  if (a.shape().size() != 2)
    throw ShapeError("slice_cols: tensor is not 2-D");
  const std::size_t m = a.rows(), nn = a.cols();
  if (c0 + len > nn)
    throw ShapeError("slice_cols: range exceeds " + std::to_string(nn) +
                     " cols");
  std::vector<double> out(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j)
      out[i * len + j] = a.at(i * nn + c0 + j);
  auto n =
      detail::make_node({m, len}, std::move(out), "slice_cols", {a.node()});
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, c0, len, m, nn](const std::vector<double>& g,
                                       detail::BackwardScratch& s) {
      auto& da = s.at(*an);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j)
          da[i * nn + c0 + j] += g[i * len + j];
    };
  }
  return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no tensors given");
  const std::size_t m = parts[0].rows();
  std::size_t nn = 0;
  std::vector<detail::NodePtr> parents;
  for (const auto& p : parts) {
    if (p.rows() != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()));
    nn += p.cols();
    parents.push_back(p.node());
  }
  std::vector<double> out(m * nn);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        out[i * nn + off + j] = p.at(i * w + j);
    off += w;
  }
  auto n = detail::make_node({m, nn}, std::move(out), "concat_cols",
                             std::move(parents));
  if (n->requires_grad) {
    auto parents_copy = n->parents;
    n->backprop = [parents_copy, m, nn](const std::vector<double>& g,
                                        detail::BackwardScratch& s) {
      std::size_t off = 0;
      for (const auto& p : parents_copy) {
        const std::size_t w = p->shape[1];
        if (p->requires_grad) {
          auto& dp = s.at(*p);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              dp[i * w + j] += g[i * nn + off + j];
        }
        off += w;
      }
    };
  }
  return Tensor(n);
}

/// Embedding lookup: out row i = table[idx[i]]. Backward scatter-adds.
inline Tensor gather_rows(const Tensor& table,
                          const std::vector<std::size_t>& idx) {
  if (table.shape().size() != 2)
    throw ShapeError("gather_rows: table is not 2-D");
  const std::size_t rows = table.rows(), d = table.cols();
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows)
      throw ContractError("gather_rows: index " + std::to_string(idx[i]) +
                          " out of range " + std::to_string(rows));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d),
                d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto n = detail::make_node({idx.size(), d}, std::move(out), "gather_rows",
                             {table.node()});
  if (n->requires_grad) {
    auto tn = table.node();
    n->backprop = [tn, idx, d](const std::vector<double>& g,
                               detail::BackwardScratch& s) {
      auto& dt = s.at(*tn);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          dt[idx[i] * d + j] += g[i * d + j];
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Loss

/// Masked token-level negative log-likelihood:
///   -sum_t mask[t] * log softmax(logits[t])[targets[t]]
/// Positions with mask 0 contribute exactly zero to both value and gradient.
/// An all-zero mask yields loss 0 with zero gradient and logs a warning.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int>& targets,
                            const std::vector<int>& mask) {
  if (logits.shape().size() != 2)
    throw ShapeError("cross_entropy: logits are not 2-D");
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T || mask.size() != T)
    throw ShapeError("cross_entropy: logits have " + std::to_string(T) +
                     " rows but got " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(mask.size()) + " masks");
  bool any = false;
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (mask[t] == 0) continue;
    any = true;
    const int y = targets[t];
    if (y < 0 || static_cast<std::size_t>(y) >= V)
      throw ContractError("cross_entropy: target id " + std::to_string(y) +
                          " out of vocabulary " + std::to_string(V));
    const double* z = &logits.data()[t * V];
    double mx = z[0];
    for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, z[v]);
    double denom = 0.0;
    for (std::size_t v = 0; v < V; ++v) denom += std::exp(z[v] - mx);
    loss += mx + std::log(denom) - z[static_cast<std::size_t>(y)];
  }
  if (!any)
    std::fprintf(stderr,
                 "muffin: warning: cross_entropy over an all-zero mask, "
                 "loss defined as 0\n");
  auto n = detail::make_node({1}, {loss}, "cross_entropy", {logits.node()});
  if (n->requires_grad) {
    auto ln = logits.node();
    n->backprop = [ln, targets, mask, T, V](const std::vector<double>& g,
                                            detail::BackwardScratch& s) {
      auto& dl = s.at(*ln);
      for (std::size_t t = 0; t < T; ++t) {
        if (mask[t] == 0) continue;  // exactly-zero contribution
        const double* z = &ln->value[t * V];
        double mx = z[0];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, z[v]);
        double denom = 0.0;
        for (std::size_t v = 0; v < V; ++v) denom += std::exp(z[v] - mx);
        for (std::size_t v = 0; v < V; ++v) {
          const double p = std::exp(z[v] - mx) / denom;
          const double onehot =
              (static_cast<std::size_t>(targets[t]) == v) ? 1.0 : 0.0;
          dl[t * V + v] += g[0] * (p - onehot);
        }
      }
    };
  }
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Backward

/// Topologically ordered operation records reachable from a root through
/// gradient-requiring edges. `order` lists every parent before its consumers.
struct ComputeGraph {
  std::vector<detail::Node*> order;
  std::vector<detail::NodePtr> keep_alive;

  static ComputeGraph build(const Tensor& root) {
    ComputeGraph graph;
    if (!root.node()->requires_grad) return graph;
    std::unordered_map<const detail::Node*, bool> visited;
    // Iterative post-order DFS: parents land in `order` before consumers.
    std::vector<std::pair<detail::NodePtr, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited[root.node().get()] = false;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto parent = node->parents[next++];
        if (parent->requires_grad && !visited.count(parent.get())) {
          visited[parent.get()] = false;
          stack.emplace_back(std::move(parent), 0);
        }
      } else {
        graph.order.push_back(node.get());
        graph.keep_alive.push_back(node);
        stack.pop_back();
      }
    }
    return graph;
  }
};

/// Reverse-mode accumulation from a scalar root. Gradients land on every
/// reachable requires-grad node; repeated calls without zero_grad accumulate.
inline void backward(const Tensor& root) {
  if (root.numel() != 1)
    throw ContractError("backward: root must be scalar, got shape " +
                        shape_str(root.shape()));
  if (!root.node()->requires_grad) return;

  ComputeGraph graph = ComputeGraph::build(root);
  detail::BackwardScratch scratch;
  scratch.at(*root.node())[0] = 1.0;

  for (auto it = graph.order.rbegin(); it != graph.order.rend(); ++it) {
    detail::Node* node = *it;
    auto found = scratch.grads.find(node);
    if (found == scratch.grads.end()) continue;
    if (node->backprop) node->backprop(found->second, scratch);
  }
  for (detail::Node* node : graph.order) {
    if (!node->requires_grad) continue;
    auto found = scratch.grads.find(node);
    if (found == scratch.grads.end()) continue;
    if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
    for (std::size_t i = 0; i < node->numel(); ++i)
      node->grad[i] += found->second[i];
  }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

struct FiniteDiffEntry {
  std::string name;
  std::size_t checked = 0;     // coordinates compared
  std::size_t non_finite = 0;  // coordinates where f was non-finite
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
};

struct FiniteDiffReport {
  std::vector<FiniteDiffEntry> entries;
  double max_rel_err = 0.0;

  bool passes(double tol) const {
    if (max_rel_err >= tol) return false;
    for (const auto& e : entries)
      if (e.non_finite > 0) return false;
    return true;
  }
};

/// Central-difference check of autodiff gradients for every requires-grad
/// parameter. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Non-finite evaluations at perturbed points are counted per
/// coordinate and skipped, not fatal. Frozen parameters are excluded.
inline FiniteDiffReport finite_diff_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw ContractError("finite_diff_check: eps must lie in [1e-7, 1e-3]");

  for (const auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor loss = f();
  backward(loss);

  auto eval = [&f]() -> double {
    try {
      return f().item();
    } catch (const ContractError&) {
      // Finite-check builds throw on NaN/Inf; report as non-finite instead.
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  FiniteDiffReport report;
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) continue;  // frozen: excluded from the report
    Tensor param = p;
    FiniteDiffEntry entry;
    entry.name = name;
    std::vector<double> analytic(param.numel(), 0.0);
    if (param.has_grad()) {
      auto g = param.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto& values = param.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double v0 = values[i];
      values[i] = v0 + eps;
      const double fp = eval();
      values[i] = v0 - eps;
      const double fm = eval();
      values[i] = v0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        ++entry.non_finite;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++entry.checked;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace muffin
