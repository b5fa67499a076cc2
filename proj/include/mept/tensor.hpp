#pragma once

// Dense double-precision tensors with tape-based reverse-mode autodiff.
// The graph is rebuilt on every forward pass; nodes are never mutated after
// construction except for gradient accumulation. Shapes use row-major layout.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mept/common.hpp"
#include "mept/rng.hpp"

namespace mept {

namespace detail {

inline size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<size_t>(d);
  }
  return n;
}

// C[r x c] += A[r x k] * B[k x c]. The j-inner loop carries no reduction, so
// it vectorizes under plain -O2/-O3.
inline void mm_nn(const double* __restrict__ a, const double* __restrict__ b,
                  double* __restrict__ c, int r, int k, int cc) {
  for (int i = 0; i < r; ++i) {
    double* ci = c + static_cast<size_t>(i) * cc;
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + static_cast<size_t>(p) * cc;
      for (int j = 0; j < cc; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[r x c] += A^T * B, with A stored as [k x r]
inline void mm_tn(const double* __restrict__ a, const double* __restrict__ b,
                  double* __restrict__ c, int r, int k, int cc) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<size_t>(p) * r;
    const double* bp = b + static_cast<size_t>(p) * cc;
    for (int i = 0; i < r; ++i) {
      double av = ap[i];
      double* ci = c + static_cast<size_t>(i) * cc;
      for (int j = 0; j < cc; ++j) ci[j] += av * bp[j];
    }
  }
}

// out[c x r] = transpose of m[r x c]
inline void transpose_into(const double* __restrict__ m, double* __restrict__ out, int r, int c) {
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = m[static_cast<size_t>(i) * c + j];
}

}  // namespace detail

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    size_t count = detail::shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(count, 0.0);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false) {
    size_t count = detail::shape_numel(shape);
    if (count != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  // Mutable access is for parameter updates between steps only; tensors that
  // participate in a live graph must not be written through this.
  std::vector<double>& values_mut() { return node_->value; }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  std::shared_ptr<TensorNode> node() const { return node_; }
  TensorNode* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_result(std::vector<int> shape, std::vector<double> value,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const Tensor& p : parents) {
    n->parents.push_back(p.node());
    if (p.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Tensor(n);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and simple ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto an = a.node();
  return detail::make_result(a.shape(), std::move(out), {a}, [an, c](TensorNode& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
  });
}

// y = s * x where s is a 1-element tensor participating in the graph.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must be scalar, got " + shape_str(s.shape()));
  double sv = s.values()[0];
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  auto xn = x.node();
  auto sn = s.node();
  return detail::make_result(x.shape(), std::move(out), {x, s}, [xn, sn](TensorNode& self) {
    double sv2 = sn->value[0];
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * sv2;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->value[i];
      sn->grad[0] += acc;
    }
  });
}

// x[..., d] + b[d]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  int d = b.dim(0);
  size_t rows = x.numel() / static_cast<size_t>(d);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& bv = b.values();
  for (size_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[static_cast<size_t>(j)];
  auto xn = x.node();
  auto bn = b.node();
  return detail::make_result(x.shape(), std::move(out), {x, b}, [xn, bn, d, rows](TensorNode& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) bn->grad[static_cast<size_t>(j)] += self.grad[r * d + j];
    }
  });
}

// x[B, S, d] + p[S, d], broadcast over the leading batch dimension.
inline Tensor add_seq(const Tensor& x, const Tensor& p) {
  if (x.rank() != 3 || p.rank() != 2 || x.dim(1) != p.dim(0) || x.dim(2) != p.dim(1))
    throw ShapeError("add_seq: " + shape_str(x.shape()) + " vs " + shape_str(p.shape()));
  size_t batch = static_cast<size_t>(x.dim(0));
  size_t plane = p.numel();
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& pv = p.values();
  for (size_t b = 0; b < batch; ++b)
    for (size_t i = 0; i < plane; ++i) out[b * plane + i] = xv[b * plane + i] + pv[i];
  auto xn = x.node();
  auto pn = p.node();
  return detail::make_result(x.shape(), std::move(out), {x, p}, [xn, pn, batch, plane](TensorNode& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (pn->requires_grad) {
      pn->ensure_grad();
      for (size_t b = 0; b < batch; ++b)
        for (size_t i = 0; i < plane; ++i) pn->grad[i] += self.grad[b * plane + i];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
  });
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) {
    double v = xv[i];
    double u = kC * (v + kA * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double v = xn->value[i];
      double u = kC * (v + kA * v * v * v);
      double t = std::tanh(u);
      double du = kC * (1.0 + 3.0 * kA * v * v);
      double dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      xn->grad[i] += self.grad[i] * dydx;
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto xn = x.node();
  return detail::make_result({1}, {s}, {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    double g = self.grad[0];
    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
}

// Mean along one axis; the axis is removed from the result shape.
inline Tensor mean(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& shape = x.shape();
  int n = shape[static_cast<size_t>(axis)];
  size_t inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(shape[static_cast<size_t>(i)]);
  size_t outer = x.numel() / (inner * static_cast<size_t>(n));
  std::vector<int> out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(shape[static_cast<size_t>(i)]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(outer * inner, 0.0);
  const auto& xv = x.values();
  for (size_t o = 0; o < outer; ++o)
    for (int j = 0; j < n; ++j)
      for (size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * static_cast<size_t>(n) + static_cast<size_t>(j)) * inner + i];
  double inv = 1.0 / n;
  for (double& v : out) v *= inv;
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [xn, n, inner, outer, inv](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t o = 0; o < outer; ++o)
      for (int j = 0; j < n; ++j)
        for (size_t i = 0; i < inner; ++i)
          xn->grad[(o * static_cast<size_t>(n) + static_cast<size_t>(j)) * inner + i] +=
              self.grad[o * inner + i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Matrix products

// a[..., r, k] @ b[k, c]; leading dimensions of a are treated as batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2)
    throw ShapeError("matmul: need a[..,r,k] and b[k,c], got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int k = a.dim(a.rank() - 1);
  int r = a.dim(a.rank() - 2);
  if (k != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  int c = b.dim(1);
  size_t batch = a.numel() / (static_cast<size_t>(r) * k);
  std::vector<int> out_shape = a.shape();
  out_shape.back() = c;
  std::vector<double> out(batch * static_cast<size_t>(r) * c, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (size_t m = 0; m < batch; ++m)
    detail::mm_nn(av + m * static_cast<size_t>(r) * k, bv,
                  out.data() + m * static_cast<size_t>(r) * c, r, k, c);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                             [an, bn, r, k, c, batch](TensorNode& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = dC * B^T; materialize B^T once, shared across batch slabs
      std::vector<double> bt(static_cast<size_t>(c) * k);
      detail::transpose_into(bn->value.data(), bt.data(), k, c);
      for (size_t m = 0; m < batch; ++m)
        detail::mm_nn(self.grad.data() + m * static_cast<size_t>(r) * c, bt.data(),
                      an->grad.data() + m * static_cast<size_t>(r) * k, r, c, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t m = 0; m < batch; ++m)
        detail::mm_tn(an->value.data() + m * static_cast<size_t>(r) * k,
                      self.grad.data() + m * static_cast<size_t>(r) * c, bn->grad.data(), k, r, c);
    }
  });
}

// Batched product: a[B, r, k] @ b[B, k, c].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  int nb = a.dim(0), r = a.dim(1), k = a.dim(2), c = b.dim(2);
  std::vector<double> out(static_cast<size_t>(nb) * r * c, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (int m = 0; m < nb; ++m)
    detail::mm_nn(av + static_cast<size_t>(m) * r * k, bv + static_cast<size_t>(m) * k * c,
                  out.data() + static_cast<size_t>(m) * r * c, r, k, c);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result({nb, r, c}, std::move(out), {a, b},
                             [an, bn, nb, r, k, c](TensorNode& self) {
    std::vector<double> bt;
    if (an->requires_grad) {
      an->ensure_grad();
      bt.resize(static_cast<size_t>(c) * k);
    }
    if (bn->requires_grad) bn->ensure_grad();
    for (int m = 0; m < nb; ++m) {
      const double* g = self.grad.data() + static_cast<size_t>(m) * r * c;
      if (an->requires_grad) {
        detail::transpose_into(bn->value.data() + static_cast<size_t>(m) * k * c, bt.data(), k, c);
        detail::mm_nn(g, bt.data(), an->grad.data() + static_cast<size_t>(m) * r * k, r, c, k);
      }
      if (bn->requires_grad) {
        detail::mm_tn(an->value.data() + static_cast<size_t>(m) * r * k, g,
                      bn->grad.data() + static_cast<size_t>(m) * k * c, k, r, c);
      }
    }
  });
}

inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank < 2, " + shape_str(x.shape()));
  std::vector<int> out_shape = x.shape();
  int r = out_shape[out_shape.size() - 2];
  int c = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  size_t batch = x.numel() / (static_cast<size_t>(r) * c);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t m = 0; m < batch; ++m) {
    size_t base = m * static_cast<size_t>(r) * c;
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out[base + static_cast<size_t>(j) * r + i] = xv[base + static_cast<size_t>(i) * c + j];
  }
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [xn, r, c, batch](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t m = 0; m < batch; ++m) {
      size_t base = m * static_cast<size_t>(r) * c;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          xn->grad[base + static_cast<size_t>(i) * c + j] +=
              self.grad[base + static_cast<size_t>(j) * r + i];
    }
  });
}

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (detail::shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto xn = x.node();
  return detail::make_result(std::move(shape), x.values(), {x}, [xn](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  int rk = x.rank();
  if (static_cast<int>(perm.size()) != rk)
    throw ShapeError("permute: perm size mismatch for " + shape_str(x.shape()));
  std::vector<int> out_shape(perm.size());
  for (int i = 0; i < rk; ++i) out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  std::vector<size_t> in_stride(static_cast<size_t>(rk), 1), out_stride(static_cast<size_t>(rk), 1);
  for (int i = rk - 2; i >= 0; --i)
    in_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(i) + 1] * static_cast<size_t>(x.dim(i + 1));
  for (int i = rk - 2; i >= 0; --i)
    out_stride[static_cast<size_t>(i)] =
        out_stride[static_cast<size_t>(i) + 1] * static_cast<size_t>(out_shape[static_cast<size_t>(i) + 1]);
  // out index -> in flat offset mapping; the rank-4 {0,2,1,3} case (attention
  // head split/merge) gets a direct loop instead of per-element div/mod
  std::vector<size_t> src(x.numel());
  if (rk == 4 && perm == std::vector<int>{0, 2, 1, 3}) {
    size_t d0 = static_cast<size_t>(x.dim(0)), d1 = static_cast<size_t>(x.dim(1)),
           d2 = static_cast<size_t>(x.dim(2)), d3 = static_cast<size_t>(x.dim(3));
    size_t o = 0;
    for (size_t a0 = 0; a0 < d0; ++a0)
      for (size_t a2 = 0; a2 < d2; ++a2)
        for (size_t a1 = 0; a1 < d1; ++a1) {
          size_t base = ((a0 * d1 + a1) * d2 + a2) * d3;
          for (size_t a3 = 0; a3 < d3; ++a3) src[o++] = base + a3;
        }
  } else {
    for (size_t o = 0; o < x.numel(); ++o) {
      size_t rem = o, in_off = 0;
      for (int i = 0; i < rk; ++i) {
        size_t q = rem / out_stride[static_cast<size_t>(i)];
        rem %= out_stride[static_cast<size_t>(i)];
        in_off += q * in_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])];
      }
      src[o] = in_off;
    }
  }
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t o = 0; o < out.size(); ++o) out[o] = xv[src[o]];
  auto xn = x.node();
  auto srcs = std::make_shared<std::vector<size_t>>(std::move(src));
  return detail::make_result(std::move(out_shape), std::move(out), {x}, [xn, srcs](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t o = 0; o < self.grad.size(); ++o) xn->grad[(*srcs)[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Slicing / selection / assembly

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
  int n = x.dim(axis);
  if (start < 0 || len <= 0 || start + len > n)
    throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  size_t inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
  size_t outer = x.numel() / (inner * static_cast<size_t>(n));
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::vector<double> out(outer * static_cast<size_t>(len) * inner);
  const auto& xv = x.values();
  for (size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * static_cast<size_t>(len) * inner,
                xv.data() + (o * static_cast<size_t>(n) + static_cast<size_t>(start)) * inner,
                static_cast<size_t>(len) * inner * sizeof(double));
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [xn, n, start, len, inner, outer](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * static_cast<size_t>(len) * inner;
      double* dst = xn->grad.data() + (o * static_cast<size_t>(n) + static_cast<size_t>(start)) * inner;
      for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i) dst[i] += g[i];
    }
  });
}

// Row i of the leading axis, with that axis dropped: [n, ...] -> [...].
inline Tensor index_axis0(const Tensor& x, int i) {
  if (x.rank() < 2) throw ShapeError("index_axis0: rank < 2, " + shape_str(x.shape()));
  if (i < 0 || i >= x.dim(0))
    throw ShapeError("index_axis0: index " + std::to_string(i) + " out of range for " +
                     shape_str(x.shape()));
  Tensor s = slice(x, 0, i, 1);
  std::vector<int> shape(x.shape().begin() + 1, x.shape().end());
  return reshape(s, std::move(shape));
}

inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank()) throw ShapeError("concat: rank mismatch");
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " differ outside axis " + std::to_string(axis));
  size_t inner = 1;
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<size_t>(a.dim(i));
  int na = a.dim(axis), nb = b.dim(axis);
  size_t outer = a.numel() / (inner * static_cast<size_t>(na));
  std::vector<int> out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = na + nb;
  std::vector<double> out(a.numel() + b.numel());
  const auto& avv = a.values();
  const auto& bvv = b.values();
  size_t av_blk = static_cast<size_t>(na) * inner, bv_blk = static_cast<size_t>(nb) * inner;
  for (size_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (av_blk + bv_blk), avv.data() + o * av_blk, av_blk * sizeof(double));
    std::memcpy(out.data() + o * (av_blk + bv_blk) + av_blk, bvv.data() + o * bv_blk,
                bv_blk * sizeof(double));
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                             [an, bn, outer, av_blk, bv_blk](TensorNode& self) {
    for (size_t o = 0; o < outer; ++o) {
      const double* g = self.grad.data() + o * (av_blk + bv_blk);
      if (an->requires_grad) {
        an->ensure_grad();
        double* dst = an->grad.data() + o * av_blk;
        for (size_t i = 0; i < av_blk; ++i) dst[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* dst = bn->grad.data() + o * bv_blk;
        for (size_t i = 0; i < bv_blk; ++i) dst[i] += g[i + av_blk];
      }
    }
  });
}

// Stack equally-shaped tensors along a new leading axis.
inline Tensor stack_axis0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack_axis0: empty input");
  const auto& s0 = parts[0].shape();
  for (const Tensor& t : parts)
    if (t.shape() != s0) throw ShapeError("stack_axis0: inconsistent shapes");
  size_t blk = parts[0].numel();
  std::vector<int> out_shape;
  out_shape.push_back(static_cast<int>(parts.size()));
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  std::vector<double> out(blk * parts.size());
  for (size_t i = 0; i < parts.size(); ++i)
    std::memcpy(out.data() + i * blk, parts[i].values().data(), blk * sizeof(double));
  std::vector<std::shared_ptr<TensorNode>> nodes;
  nodes.reserve(parts.size());
  for (const Tensor& t : parts) nodes.push_back(t.node());
  auto nodes_sp = std::make_shared<std::vector<std::shared_ptr<TensorNode>>>(std::move(nodes));
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [nodes_sp, blk](TensorNode& self) {
    for (size_t i = 0; i < nodes_sp->size(); ++i) {
      auto& p = (*nodes_sp)[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      const double* g = self.grad.data() + i * blk;
      for (size_t j = 0; j < blk; ++j) p->grad[j] += g[j];
    }
  });
}

// One element of x as a scalar node (flat index); gradient scatters back.
inline Tensor at_flat(const Tensor& x, size_t flat_index) {
  if (flat_index >= x.numel())
    throw ShapeError("at_flat: index " + std::to_string(flat_index) + " out of range for " +
                     shape_str(x.shape()));
  auto xn = x.node();
  return detail::make_result({1}, {x.values()[flat_index]}, {x}, [xn, flat_index](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    xn->grad[flat_index] += self.grad[0];
  });
}

// Embedding lookup: table[V, d] gathered by ids (any shape) -> [ids..., d].
inline Tensor embed(const Tensor& table, const std::vector<int>& ids,
                    const std::vector<int>& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embed: table must be 2-D, got " + shape_str(table.shape()));
  int v = table.dim(0), d = table.dim(1);
  if (detail::shape_numel(ids_shape) != ids.size())
    throw ShapeError("embed: ids length does not match ids_shape");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ValueError("embed: token id " + std::to_string(id) + " outside vocab of " + std::to_string(v));
  std::vector<int> out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * static_cast<size_t>(d));
  const auto& tv = table.values();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * static_cast<size_t>(d),
                tv.data() + static_cast<size_t>(ids[i]) * d, static_cast<size_t>(d) * sizeof(double));
  auto tn = table.node();
  auto ids_sp = std::make_shared<std::vector<int>>(ids);
  return detail::make_result(std::move(out_shape), std::move(out), {table},
                             [tn, ids_sp, d](TensorNode& self) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < ids_sp->size(); ++i) {
      const double* g = self.grad.data() + i * static_cast<size_t>(d);
      double* dst = tn->grad.data() + static_cast<size_t>((*ids_sp)[i]) * d;
      for (int j = 0; j < d; ++j) dst[j] += g[j];
    }
  });
}

// Weighted mean over the sequence axis: x[B, S, d] with weights[B*S]
// (row-major, each example's weights summing to 1) -> [B, d].
inline Tensor weighted_mean_seq(const Tensor& x, const std::vector<double>& weights) {
  if (x.rank() != 3) throw ShapeError("weighted_mean_seq: need [B,S,d], got " + shape_str(x.shape()));
  size_t batch = static_cast<size_t>(x.dim(0)), seq = static_cast<size_t>(x.dim(1)),
         d = static_cast<size_t>(x.dim(2));
  if (weights.size() != batch * seq)
    throw ShapeError("weighted_mean_seq: weights length mismatch");
  std::vector<double> out(batch * d, 0.0);
  const auto& xv = x.values();
  for (size_t b = 0; b < batch; ++b)
    for (size_t s = 0; s < seq; ++s) {
      double w = weights[b * seq + s];
      if (w == 0.0) continue;
      const double* row = xv.data() + (b * seq + s) * d;
      double* dst = out.data() + b * d;
      for (size_t j = 0; j < d; ++j) dst[j] += w * row[j];
    }
  auto xn = x.node();
  auto w_sp = std::make_shared<std::vector<double>>(weights);
  return detail::make_result({static_cast<int>(batch), static_cast<int>(d)}, std::move(out), {x},
                             [xn, w_sp, batch, seq, d](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t b = 0; b < batch; ++b)
      for (size_t s = 0; s < seq; ++s) {
        double w = (*w_sp)[b * seq + s];
        if (w == 0.0) continue;
        const double* g = self.grad.data() + b * d;
        double* dst = xn->grad.data() + (b * seq + s) * d;
        for (size_t j = 0; j < d; ++j) dst[j] += w * g[j];
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, loss

// Softmax along `axis`, max-subtracted for stability.
inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  int n = x.dim(axis);
  size_t inner = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<size_t>(x.dim(i));
  size_t outer = x.numel() / (inner * static_cast<size_t>(n));
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      size_t base = o * static_cast<size_t>(n) * inner + i;
      double mx = xv[base];
      for (int j = 1; j < n; ++j) mx = std::max(mx, xv[base + static_cast<size_t>(j) * inner]);
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        double e = std::exp(xv[base + static_cast<size_t>(j) * inner] - mx);
        out[base + static_cast<size_t>(j) * inner] = e;
        z += e;
      }
      double invz = 1.0 / z;
      for (int j = 0; j < n; ++j) out[base + static_cast<size_t>(j) * inner] *= invz;
    }
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {x}, [xn, n, inner, outer](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t o = 0; o < outer; ++o)
      for (size_t i = 0; i < inner; ++i) {
        size_t base = o * static_cast<size_t>(n) * inner + i;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) {
          size_t ix = base + static_cast<size_t>(j) * inner;
          dot += self.grad[ix] * self.value[ix];
        }
        for (int j = 0; j < n; ++j) {
          size_t ix = base + static_cast<size_t>(j) * inner;
          xn->grad[ix] += self.value[ix] * (self.grad[ix] - dot);
        }
      }
  });
}

// LayerNorm over the last axis with learned gain/bias. Constant rows have
// zero variance; the epsilon keeps them finite and they normalize to zero.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  int d = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(d) + "]");
  size_t rows = x.numel() / static_cast<size_t>(d);
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * static_cast<size_t>(d);
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int j = 0; j < d; ++j) {
      double h = (row[j] - mu) * is;
      xhat[r * static_cast<size_t>(d) + static_cast<size_t>(j)] = h;
      out[r * static_cast<size_t>(d) + static_cast<size_t>(j)] = gv[static_cast<size_t>(j)] * h + bv[static_cast<size_t>(j)];
    }
  }
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  auto xhat_sp = std::make_shared<std::vector<double>>(std::move(xhat));
  auto is_sp = std::make_shared<std::vector<double>>(std::move(inv_std));
  return detail::make_result(x.shape(), std::move(out), {x, gain, bias},
                             [xn, gn, bn, xhat_sp, is_sp, d, rows](TensorNode& self) {
    for (size_t r = 0; r < rows; ++r) {
      const double* g = self.grad.data() + r * static_cast<size_t>(d);
      const double* h = xhat_sp->data() + r * static_cast<size_t>(d);
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int j = 0; j < d; ++j) gn->grad[static_cast<size_t>(j)] += g[j] * h[j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int j = 0; j < d; ++j) bn->grad[static_cast<size_t>(j)] += g[j];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        double* dx = xn->grad.data() + r * static_cast<size_t>(d);
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (int j = 0; j < d; ++j) {
          double dh = g[j] * gn->value[static_cast<size_t>(j)];
          mean_dh += dh;
          mean_dh_h += dh * h[j];
        }
        mean_dh /= d;
        mean_dh_h /= d;
        double is = (*is_sp)[r];
        for (int j = 0; j < d; ++j) {
          double dh = g[j] * gn->value[static_cast<size_t>(j)];
          dx[j] += is * (dh - mean_dh - h[j] * mean_dh_h);
        }
      }
    }
  });
}

// Mean cross entropy over rows: logits[B, C] (or [C] with one label).
// Fused log-softmax keeps large logits stable.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  int rank = logits.rank();
  if (rank != 1 && rank != 2)
    throw ShapeError("cross_entropy: logits must be [C] or [B,C], got " + shape_str(logits.shape()));
  int batch = rank == 2 ? logits.dim(0) : 1;
  int classes = rank == 2 ? logits.dim(1) : logits.dim(0);
  if (static_cast<int>(labels.size()) != batch)
    throw ShapeError("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw ValueError("cross_entropy: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(classes) + ")");
  const auto& lv = logits.values();
  std::vector<double> probs(lv.size());
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const double* row = lv.data() + static_cast<size_t>(b) * classes;
    double mx = row[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < classes; ++j) {
      double e = std::exp(row[j] - mx);
      probs[static_cast<size_t>(b) * classes + static_cast<size_t>(j)] = e;
      z += e;
    }
    double invz = 1.0 / z;
    for (int j = 0; j < classes; ++j) probs[static_cast<size_t>(b) * classes + static_cast<size_t>(j)] *= invz;
    total += mx + std::log(z) - row[labels[static_cast<size_t>(b)]];
  }
  total /= batch;
  auto ln = logits.node();
  auto probs_sp = std::make_shared<std::vector<double>>(std::move(probs));
  auto labels_sp = std::make_shared<std::vector<int>>(labels);
  return detail::make_result({1}, {total}, {logits},
                             [ln, probs_sp, labels_sp, batch, classes](TensorNode& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    double g = self.grad[0] / batch;
    for (int b = 0; b < batch; ++b)
      for (int j = 0; j < classes; ++j) {
        size_t ix = static_cast<size_t>(b) * classes + static_cast<size_t>(j);
        double p = (*probs_sp)[ix];
        ln->grad[ix] += g * (p - (j == (*labels_sp)[static_cast<size_t>(b)] ? 1.0 : 0.0));
      }
  });
}

inline Tensor cross_entropy(const Tensor& logits, int label) {
  return cross_entropy(logits, std::vector<int>{label});
}

// Inverted dropout; identity when p == 0. The mask is drawn from `rng`.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ValueError("dropout: p must be < 1");
  double keep = 1.0 - p;
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto xn = x.node();
  auto mask_sp = std::make_shared<std::vector<double>>(std::move(mask));
  return detail::make_result(x.shape(), std::move(out), {x}, [xn, mask_sp](TensorNode& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * (*mask_sp)[i];
  });
}

// ---------------------------------------------------------------------------
// Reverse pass

// Populates grads of every requires_grad node reachable from `loss`.
// Repeated calls accumulate; callers zero grads between steps.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  // Iterative post-order DFS; graphs can be deep enough to overflow recursion.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.raw(), 0);
  visited.insert(loss.raw());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Interior (non-leaf) grads are scratch space for this pass; leaves keep
  // accumulating across calls.
  for (TensorNode* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
  loss.raw()->ensure_grad();
  loss.raw()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace mept
