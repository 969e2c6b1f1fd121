#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "grsn/errors.hpp"
#include "grsn/kernels.hpp"

namespace grsn {

// Reverse-mode autodiff on a dynamically built tape.  A Tensor is a shared
// handle to a graph node; ops allocate a result node, run the forward kernel
// immediately, and (when gradients are enabled) attach a closure that knows
// how to push gradients to the node's parents.  backward() walks the graph
// in reverse topological order and accumulates into each node's grad buffer;
// gradients are never cleared implicitly.
//
// The scalar type is a template parameter: float is used for training and
// inference, double for high-precision gradient verification.

namespace detail {

template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same extent as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;
};

inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

inline int numel_of(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
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
inline void ensure_grad(Node<T>* n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_ref(); }

// Disables graph construction in scope; forwards run without recording.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode_ref()) { detail::grad_mode_ref() = false; }
  ~NoGradGuard() { detail::grad_mode_ref() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, bool requires_grad = false) {
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + detail::shape_str(shape));
    }
    node_ = std::make_shared<detail::Node<T>>();
    node_->shape = std::move(shape);
    node_->value.assign(detail::numel_of(node_->shape), T(0));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (values.size() != t.node_->value.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not fill shape " +
                       detail::shape_str(t.shape()));
    }
    t.node_->value = std::move(values);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int numel() const { return static_cast<int>(node_->value.size()); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw UsageError("item() requires a single-element tensor, got shape " + detail::shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw UsageError("no gradient accumulated for this tensor");
    return node_->grad;
  }

  std::vector<T>& grad_buffer() {
    detail::ensure_grad(node_.get());
    return node_->grad;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Deep copy of the values; the copy is a leaf detached from any graph.
  Tensor clone() const {
    Tensor t(shape());
    t.node_->value = node_->value;
    return t;
  }

  detail::Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(std::vector<int> shape) {
  return Tensor<T>(std::move(shape));
}

template <typename T>
void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> parents, std::function<void()> fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return;
  Node<T>* n = out.node();
  n->requires_grad = true;
  for (const auto& p : parents) n->parents.push_back(p.node_ptr());
  n->backprop = std::move(fn);
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_result<T>({m, n});
  kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on, m, k, n] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      kernels::gemm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      kernels::gemm_tn(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n, true);
    }
  });
  return out;
}

// a[m,k] * b[n,k]^T -> [m,n]; the attention-logits shape without an explicit
// transpose node.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: incompatible shapes " + detail::shape_str(a.shape()) + " x " +
                     detail::shape_str(b.shape()) + "^T");
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto out = detail::make_result<T>({m, n});
  kernels::gemm_nt(a.data(), b.data(), out.data(), m, k, n, false);
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on, m, k, n] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      kernels::gemm_nn(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      kernels::gemm_tn(on->grad.data(), an->value.data(), bn->grad.data(), n, m, k, true);
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.ndim() != 2) throw ShapeError("transpose2d: expected rank 2, got " + detail::shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  auto out = detail::make_result<T>({n, m});
  const T* xd = x.data();
  T* od = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) od[static_cast<std::size_t>(j) * m + i] = xd[static_cast<std::size_t>(i) * n + j];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, m, n] {
    detail::ensure_grad(xn);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        xn->grad[static_cast<std::size_t>(i) * n + j] += on->grad[static_cast<std::size_t>(j) * m + i];
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
  if (detail::numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + detail::shape_str(x.shape()) + " as " + detail::shape_str(shape));
  }
  auto out = detail::make_result<T>(std::move(shape));
  std::copy(x.data(), x.data() + x.numel(), out.data());
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_result<T>(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  const int n = a.numel();
  for (int i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_result<T>(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  const int n = a.numel();
  for (int i = 0; i < n; ++i) od[i] = ad[i] - bd[i];
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_result<T>(a.shape());
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  const int n = a.numel();
  for (int i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  auto out = detail::make_result<T>(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const int n = x.numel();
  for (int i = 0; i < n; ++i) od[i] = c * xd[i];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, c] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += c * on->grad[i];
  });
  return out;
}

// Broadcasts b over the last dimension of x.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.ndim() != 1 || x.ndim() < 1 || x.dim(x.ndim() - 1) != b.dim(0)) {
    throw ShapeError("add_bias: bias " + detail::shape_str(b.shape()) + " does not match last dim of " +
                     detail::shape_str(x.shape()));
  }
  const int d = b.dim(0);
  const int rows = x.numel() / d;
  auto out = detail::make_result<T>(x.shape());
  const T* xd = x.data();
  const T* bd = b.data();
  T* od = out.data();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < d; ++j) od[static_cast<std::size_t>(i) * d + j] = xd[static_cast<std::size_t>(i) * d + j] + bd[j];
  auto* xn = x.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {x, b}, [xn, bn, on, rows, d] {
    if (xn->requires_grad) {
      detail::ensure_grad(xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) bn->grad[j] += on->grad[static_cast<std::size_t>(i) * d + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = detail::make_result<T>(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const int n = x.numel();
  for (int i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  auto out = detail::make_result<T>(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const int n = x.numel();
  for (int i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : slope * xd[i];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, slope] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      xn->grad[i] += (xn->value[i] > T(0) ? on->grad[i] : slope * on->grad[i]);
  });
  return out;
}

namespace detail {
template <typename T>
inline T sigmoid_stable(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}
}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = detail::make_result<T>(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const int n = x.numel();
  for (int i = 0; i < n; ++i) od[i] = detail::sigmoid_stable(xd[i]);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < on->grad.size(); ++i) {
      const T y = on->value[i];
      xn->grad[i] += on->grad[i] * y * (T(1) - y);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.ndim() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + detail::shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  const T* xd = x.data();
  for (int i = 0; i < m * n; ++i) {
    if (!std::isfinite(xd[i])) throw NumericError("softmax_rows: non-finite input at index " + std::to_string(i));
  }
  auto out = detail::make_result<T>({m, n});
  T* od = out.data();
  for (int i = 0; i < m; ++i) {
    const T* row = xd + static_cast<std::size_t>(i) * n;
    T* orow = od + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) orow[j] *= inv;
  }
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, m, n] {
    detail::ensure_grad(xn);
    for (int i = 0; i < m; ++i) {
      const T* y = on->value.data() + static_cast<std::size_t>(i) * n;
      const T* g = on->grad.data() + static_cast<std::size_t>(i) * n;
      T* dx = xn->grad.data() + static_cast<std::size_t>(i) * n;
      T s = T(0);
      for (int j = 0; j < n; ++j) s += g[j] * y[j];
      for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - s);
    }
  });
  return out;
}

// Row-wise layer normalisation with learned affine parameters; the variance
// is the population variance and eps sits inside the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.ndim() != 2) throw ShapeError("layer_norm: expected rank 2, got " + detail::shape_str(x.shape()));
  const int m = x.dim(0), d = x.dim(1);
  if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d) {
    throw ShapeError("layer_norm: affine params " + detail::shape_str(gamma.shape()) + "/" +
                     detail::shape_str(beta.shape()) + " do not match feature dim " + std::to_string(d));
  }
  auto out = detail::make_result<T>({m, d});
  const T* xd = x.data();
  const T* gd = gamma.data();
  const T* bd = beta.data();
  T* od = out.data();
  for (int i = 0; i < m; ++i) {
    const T* row = xd + static_cast<std::size_t>(i) * d;
    T* orow = od + static_cast<std::size_t>(i) * d;
    T mean = T(0);
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      const T c = row[j] - mean;
      var += c * c;
    }
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) orow[j] = gd[j] * ((row[j] - mean) * inv) + bd[j];
  }
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  auto* on = out.node();
  detail::attach(out, {x, gamma, beta}, [xn, gn, bn, on, m, d, eps] {
    std::vector<T> xhat(static_cast<std::size_t>(d));
    for (int i = 0; i < m; ++i) {
      const T* row = xn->value.data() + static_cast<std::size_t>(i) * d;
      const T* g = on->grad.data() + static_cast<std::size_t>(i) * d;
      T mean = T(0);
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= T(d);
      T var = T(0);
      for (int j = 0; j < d; ++j) {
        const T c = row[j] - mean;
        var += c * c;
      }
      var /= T(d);
      const T inv = T(1) / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j) xhat[static_cast<std::size_t>(j)] = (row[j] - mean) * inv;
      if (gn->requires_grad) {
        detail::ensure_grad(gn);
        for (int j = 0; j < d; ++j) gn->grad[j] += g[j] * xhat[static_cast<std::size_t>(j)];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(bn);
        for (int j = 0; j < d; ++j) bn->grad[j] += g[j];
      }
      if (xn->requires_grad) {
        detail::ensure_grad(xn);
        T* dx = xn->grad.data() + static_cast<std::size_t>(i) * d;
        T mean_h = T(0), mean_hx = T(0);
        for (int j = 0; j < d; ++j) {
          const T h = gn->value[j] * g[j];
          mean_h += h;
          mean_hx += h * xhat[static_cast<std::size_t>(j)];
        }
        mean_h /= T(d);
        mean_hx /= T(d);
        for (int j = 0; j < d; ++j) {
          const T h = gn->value[j] * g[j];
          dx[j] += inv * (h - mean_h - xhat[static_cast<std::size_t>(j)] * mean_hx);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape surgery

template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 1) {
    throw ShapeError("concat_lastdim: rank mismatch " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  }
  for (int i = 0; i + 1 < a.ndim(); ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_lastdim: leading dims differ " + detail::shape_str(a.shape()) + " vs " +
                       detail::shape_str(b.shape()));
    }
  }
  const int p = a.dim(a.ndim() - 1);
  const int q = b.dim(b.ndim() - 1);
  const int rows = a.numel() / p;
  std::vector<int> oshape = a.shape();
  oshape.back() = p + q;
  auto out = detail::make_result<T>(std::move(oshape));
  const T* ad = a.data();
  const T* bd = b.data();
  T* od = out.data();
  for (int i = 0; i < rows; ++i) {
    std::copy(ad + static_cast<std::size_t>(i) * p, ad + static_cast<std::size_t>(i + 1) * p,
              od + static_cast<std::size_t>(i) * (p + q));
    std::copy(bd + static_cast<std::size_t>(i) * q, bd + static_cast<std::size_t>(i + 1) * q,
              od + static_cast<std::size_t>(i) * (p + q) + p);
  }
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on, rows, p, q] {
    for (int i = 0; i < rows; ++i) {
      const T* g = on->grad.data() + static_cast<std::size_t>(i) * (p + q);
      if (an->requires_grad) {
        detail::ensure_grad(an);
        T* da = an->grad.data() + static_cast<std::size_t>(i) * p;
        for (int j = 0; j < p; ++j) da[j] += g[j];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(bn);
        T* db = bn->grad.data() + static_cast<std::size_t>(i) * q;
        for (int j = 0; j < q; ++j) db[j] += g[p + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, int start, int len) {
  const int last = x.dim(x.ndim() - 1);
  if (start < 0 || len <= 0 || start + len > last) {
    throw ShapeError("slice_lastdim: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") out of bounds for last dim " + std::to_string(last));
  }
  const int rows = x.numel() / last;
  std::vector<int> oshape = x.shape();
  oshape.back() = len;
  auto out = detail::make_result<T>(std::move(oshape));
  const T* xd = x.data();
  T* od = out.data();
  for (int i = 0; i < rows; ++i)
    std::copy(xd + static_cast<std::size_t>(i) * last + start, xd + static_cast<std::size_t>(i) * last + start + len,
              od + static_cast<std::size_t>(i) * len);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, rows, last, start, len] {
    detail::ensure_grad(xn);
    for (int i = 0; i < rows; ++i) {
      const T* g = on->grad.data() + static_cast<std::size_t>(i) * len;
      T* dx = xn->grad.data() + static_cast<std::size_t>(i) * last + start;
      for (int j = 0; j < len; ++j) dx[j] += g[j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::vector<int> indices) {
  if (x.ndim() != 2) throw ShapeError("gather_rows: expected rank 2, got " + detail::shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= m) throw UsageError("gather_rows: index " + std::to_string(idx) + " out of range [0," + std::to_string(m) + ")");
  }
  const int k = static_cast<int>(indices.size());
  if (k == 0) throw UsageError("gather_rows: empty index list");
  auto out = detail::make_result<T>({k, n});
  const T* xd = x.data();
  T* od = out.data();
  for (int i = 0; i < k; ++i)
    std::copy(xd + static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * n,
              xd + static_cast<std::size_t>(indices[static_cast<std::size_t>(i)] + 1) * n,
              od + static_cast<std::size_t>(i) * n);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, idx = std::move(indices), n] {
    detail::ensure_grad(xn);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* g = on->grad.data() + i * n;
      T* dx = xn->grad.data() + static_cast<std::size_t>(idx[i]) * n;
      for (int j = 0; j < n; ++j) dx[j] += g[j];
    }
  });
  return out;
}

// [C,H,W] grid -> [H*W, C] sequence, cells in row-major spatial order.
template <typename T>
Tensor<T> flatten_grid(const Tensor<T>& x) {
  if (x.ndim() != 3) throw ShapeError("flatten_grid: expected [C,H,W], got " + detail::shape_str(x.shape()));
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto out = detail::make_result<T>({hw, c});
  const T* xd = x.data();
  T* od = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) od[static_cast<std::size_t>(p) * c + ch] = xd[static_cast<std::size_t>(ch) * hw + p];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, c, hw] {
    detail::ensure_grad(xn);
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < hw; ++p)
        xn->grad[static_cast<std::size_t>(ch) * hw + p] += on->grad[static_cast<std::size_t>(p) * c + ch];
  });
  return out;
}

// [H*W, C] sequence -> [C,H,W] grid; inverse of flatten_grid.
template <typename T>
Tensor<T> rearrange_grid(const Tensor<T>& x, int h, int w) {
  if (x.ndim() != 2 || x.dim(0) != h * w) {
    throw ShapeError("rearrange_grid: cannot view " + detail::shape_str(x.shape()) + " as " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  const int c = x.dim(1), hw = h * w;
  auto out = detail::make_result<T>({c, h, w});
  const T* xd = x.data();
  T* od = out.data();
  for (int p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) od[static_cast<std::size_t>(ch) * hw + p] = xd[static_cast<std::size_t>(p) * c + ch];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, c, hw] {
    detail::ensure_grad(xn);
    for (int p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch)
        xn->grad[static_cast<std::size_t>(p) * c + ch] += on->grad[static_cast<std::size_t>(ch) * hw + p];
  });
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ShapeError("concat_channels: incompatible grids " + detail::shape_str(a.shape()) + " vs " +
                     detail::shape_str(b.shape()));
  }
  const int ca = a.dim(0), cb = b.dim(0), hw = a.dim(1) * a.dim(2);
  auto out = detail::make_result<T>({ca + cb, a.dim(1), a.dim(2)});
  std::copy(a.data(), a.data() + a.numel(), out.data());
  std::copy(b.data(), b.data() + b.numel(), out.data() + a.numel());
  auto* an = a.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {a, b}, [an, bn, on, ca, cb, hw] {
    if (an->requires_grad) {
      detail::ensure_grad(an);
      for (std::size_t i = 0; i < static_cast<std::size_t>(ca) * hw; ++i) an->grad[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(bn);
      const std::size_t off = static_cast<std::size_t>(ca) * hw;
      for (std::size_t i = 0; i < static_cast<std::size_t>(cb) * hw; ++i) bn->grad[i] += on->grad[off + i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.ndim() != 3) throw ShapeError("upsample_nearest2x: expected [C,H,W], got " + detail::shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto out = detail::make_result<T>({c, 2 * h, 2 * w});
  const T* xd = x.data();
  T* od = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        od[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            xd[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, c, h, w] {
    detail::ensure_grad(xn);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          xn->grad[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
              on->grad[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions (single image, NCHW)

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input " + detail::shape_str(x.shape()) + " incompatible with weights " +
                     detail::shape_str(w.shape()));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv2d: bias " + detail::shape_str(b.shape()) + " does not match out channels " +
                     std::to_string(w.dim(0)));
  }
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = kernels::detail::conv_out_extent(h, kh, stride, pad);
  const int ow = kernels::detail::conv_out_extent(wd, kw, stride, pad);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit input " + detail::shape_str(x.shape()));
  }
  auto out = detail::make_result<T>({co, oh, ow});
  kernels::conv2d_forward(x.data(), w.data(), b.data(), out.data(), ci, h, wd, co, kh, kw, stride, pad);
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {x, w, b}, [xn, wn, bn, on, ci, h, wd, co, kh, kw, stride, pad] {
    if (xn->requires_grad) {
      detail::ensure_grad(xn);
      kernels::conv2d_grad_input(on->grad.data(), wn->value.data(), xn->grad.data(), ci, h, wd, co, kh, kw,
                                 stride, pad);
    }
    if (wn->requires_grad || bn->requires_grad) {
      detail::ensure_grad(wn);
      detail::ensure_grad(bn);
      kernels::conv2d_grad_params(on->grad.data(), xn->value.data(), wn->grad.data(),
                                  bn->requires_grad ? bn->grad.data() : nullptr, ci, h, wd, co, kh, kw, stride,
                                  pad);
    }
  });
  return out;
}

// Pointwise convolution with [co,ci] weights; numerically identical to
// flattening the grid and right-multiplying by w^T.
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 3 || w.ndim() != 2 || w.dim(1) != x.dim(0)) {
    throw ShapeError("conv1x1: input " + detail::shape_str(x.shape()) + " incompatible with weights " +
                     detail::shape_str(w.shape()));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("conv1x1: bias " + detail::shape_str(b.shape()) + " does not match out channels " +
                     std::to_string(w.dim(0)));
  }
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0);
  auto out = detail::make_result<T>({co, h, wd});
  kernels::conv2d_forward(x.data(), w.data(), b.data(), out.data(), ci, h, wd, co, 1, 1, 1, 0);
  auto* xn = x.node();
  auto* wn = w.node();
  auto* bn = b.node();
  auto* on = out.node();
  detail::attach(out, {x, w, b}, [xn, wn, bn, on, ci, h, wd, co] {
    if (xn->requires_grad) {
      detail::ensure_grad(xn);
      kernels::conv2d_grad_input(on->grad.data(), wn->value.data(), xn->grad.data(), ci, h, wd, co, 1, 1, 1, 0);
    }
    if (wn->requires_grad || bn->requires_grad) {
      detail::ensure_grad(wn);
      detail::ensure_grad(bn);
      kernels::conv2d_grad_params(on->grad.data(), xn->value.data(), wn->grad.data(),
                                  bn->requires_grad ? bn->grad.data() : nullptr, ci, h, wd, co, 1, 1, 1, 0);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto out = detail::make_result<T>({1});
  const T* xd = x.data();
  T s = T(0);
  const int n = x.numel();
  for (int i = 0; i < n; ++i) s += xd[i];
  out.data()[0] = s;
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on] {
    detail::ensure_grad(xn);
    const T g = on->grad[0];
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  auto out = detail::make_result<T>({1});
  const T* xd = x.data();
  T s = T(0);
  const int n = x.numel();
  for (int i = 0; i < n; ++i) s += xd[i];
  out.data()[0] = s / T(n);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, n] {
    detail::ensure_grad(xn);
    const T g = on->grad[0] / T(n);
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  });
  return out;
}

// Mean binary cross-entropy over logits, computed in the numerically stable
// softplus form; targets are fixed (not differentiated).
template <typename T>
Tensor<T> bce_logits_mean(const Tensor<T>& x, std::vector<T> targets) {
  if (static_cast<int>(targets.size()) != x.numel()) {
    throw ShapeError("bce_logits_mean: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(x.numel()) + " logits");
  }
  const int n = x.numel();
  auto out = detail::make_result<T>({1});
  const T* xd = x.data();
  T s = T(0);
  for (int i = 0; i < n; ++i) {
    const T z = xd[i];
    s += std::max(z, T(0)) - z * targets[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(z)));
  }
  out.data()[0] = s / T(n);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, t = std::move(targets), n] {
    detail::ensure_grad(xn);
    const T g = on->grad[0] / T(n);
    for (int i = 0; i < n; ++i)
      xn->grad[i] += g * (detail::sigmoid_stable(xn->value[i]) - t[static_cast<std::size_t>(i)]);
  });
  return out;
}

// Mean softmax cross-entropy over rows against integer class labels.
template <typename T>
Tensor<T> ce_rows_mean(const Tensor<T>& x, std::vector<int> labels) {
  if (x.ndim() != 2) throw ShapeError("ce_rows_mean: expected rank 2, got " + detail::shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  if (static_cast<int>(labels.size()) != m) {
    throw ShapeError("ce_rows_mean: " + std::to_string(labels.size()) + " labels for " + std::to_string(m) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || l >= n) throw UsageError("ce_rows_mean: label " + std::to_string(l) + " out of range [0," + std::to_string(n) + ")");
  }
  auto out = detail::make_result<T>({1});
  const T* xd = x.data();
  T s = T(0);
  for (int i = 0; i < m; ++i) {
    const T* row = xd + static_cast<std::size_t>(i) * n;
    T mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T lse = T(0);
    for (int j = 0; j < n; ++j) lse += std::exp(row[j] - mx);
    s += mx + std::log(lse) - row[labels[static_cast<std::size_t>(i)]];
  }
  out.data()[0] = s / T(m);
  auto* xn = x.node();
  auto* on = out.node();
  detail::attach(out, {x}, [xn, on, lab = std::move(labels), m, n] {
    detail::ensure_grad(xn);
    const T g = on->grad[0] / T(m);
    std::vector<T> p(static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
      const T* row = xn->value.data() + static_cast<std::size_t>(i) * n;
      T* dx = xn->grad.data() + static_cast<std::size_t>(i) * n;
      T mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int j = 0; j < n; ++j) {
        p[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
        sum += p[static_cast<std::size_t>(j)];
      }
      for (int j = 0; j < n; ++j) {
        const T soft = p[static_cast<std::size_t>(j)] / sum;
        dx[j] += g * (soft - (j == lab[static_cast<std::size_t>(i)] ? T(1) : T(0)));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw UsageError("backward: root must be a scalar, got shape " + detail::shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw UsageError("backward: root is not connected to any gradient-tracked tensor");
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  detail::ensure_grad(root.node());
  root.node()->grad[0] += T(1);
  // Reverse postorder visits every consumer before its producers.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::ensure_grad(*it);
    if ((*it)->backprop) (*it)->backprop();
  }
}

}  // namespace grsn
