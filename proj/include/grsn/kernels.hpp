#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "grsn/threading.hpp"

namespace grsn::kernels {

// Compute kernels used by the tensor layer.
//
// Every kernel exists in two forms that share the same per-element inner
// routine:
//   * the default entry points below, which split independent output rows
//     across OpenMP threads, and
//   * a serial reference under kernels::serial, which runs the identical
//     per-row code on one thread.
// Because a given output element is always produced by exactly one thread
// executing the same arithmetic in the same order, the two forms (and any
// thread count) produce bitwise-identical results.  Tests compare them
// directly and tools/kernel_bench times them against each other.
//
// Matrix convention: row-major.  gemm_* computes y[m,n] from a shared
// dimension k; the suffix gives the operand layouts:
//   gemm_nn: a[m,k] * b[k,n]
//   gemm_nt: a[m,k] * b[n,k]^T
//   gemm_tn: a[k,m]^T * b[k,n]
// With accumulate=true the product is added into y, otherwise y is
// overwritten.

namespace detail {

// Parallelising tiny kernels costs more than it saves; below this much work
// (multiply-accumulates) the OpenMP drivers stay on one thread.
constexpr std::int64_t kParallelGrain = 1 << 15;

inline int clamp_threads(std::int64_t work) {
  if (work < kParallelGrain) return 1;
  return threading::thread_cap();
}

template <typename T>
inline void gemm_nn_row(const T* a, const T* b, T* y, int k, int n, bool accumulate, int i) {
  const T* ar = a + static_cast<std::size_t>(i) * k;
  T* yr = y + static_cast<std::size_t>(i) * n;
  if (!accumulate) std::fill(yr, yr + n, T(0));
  for (int p = 0; p < k; ++p) {
    const T av = ar[p];
    const T* br = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) yr[j] += av * br[j];
  }
}

// Fixed-order multi-accumulator dot product.  The eight partial sums give
// the compiler an obvious SIMD reduction without reassociating a single
// serial chain, and the summation order is the same everywhere it is used.
template <typename T>
inline T dot_product(const T* x, const T* y, int k) {
  T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
  int p = 0;
  for (; p + 8 <= k; p += 8) {
    for (int u = 0; u < 8; ++u) acc[u] += x[p + u] * y[p + u];
  }
  T tail = T(0);
  for (; p < k; ++p) tail += x[p] * y[p];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
inline void gemm_nt_row(const T* a, const T* b, T* y, int k, int n, bool accumulate, int i) {
  const T* ar = a + static_cast<std::size_t>(i) * k;
  T* yr = y + static_cast<std::size_t>(i) * n;
  for (int j = 0; j < n; ++j) {
    const T v = dot_product(ar, b + static_cast<std::size_t>(j) * k, k);
    yr[j] = accumulate ? yr[j] + v : v;
  }
}

template <typename T>
inline void gemm_tn_row(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate, int i) {
  T* yr = y + static_cast<std::size_t>(i) * n;
  if (!accumulate) std::fill(yr, yr + n, T(0));
  for (int p = 0; p < k; ++p) {
    const T av = a[static_cast<std::size_t>(p) * m + i];
    const T* br = b + static_cast<std::size_t>(p) * n;
    for (int j = 0; j < n; ++j) yr[j] += av * br[j];
  }
}

// One row of the im2col buffer: r indexes (channel, ky, kx).
template <typename T>
inline void im2col_row(const T* x, int h, int w, int kh, int kw, int stride, int pad,
                       int oh, int ow, T* col, int r) {
  const int ic = r / (kh * kw);
  const int ky = (r / kw) % kh;
  const int kx = r % kw;
  const T* xc = x + static_cast<std::size_t>(ic) * h * w;
  T* cr = col + static_cast<std::size_t>(r) * oh * ow;
  for (int oy = 0; oy < oh; ++oy) {
    const int iy = oy * stride - pad + ky;
    T* crow = cr + static_cast<std::size_t>(oy) * ow;
    if (iy < 0 || iy >= h) {
      std::fill(crow, crow + ow, T(0));
      continue;
    }
    const T* xrow = xc + static_cast<std::size_t>(iy) * w;
    for (int ox = 0; ox < ow; ++ox) {
      const int ix = ox * stride - pad + kx;
      crow[ox] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
    }
  }
}

// Scatter-add of one input channel's gradients; all (ky,kx,oy,ox) writes for
// a channel happen on one thread in a fixed order.
template <typename T>
inline void col2im_add_channel(const T* col, int h, int w, int kh, int kw, int stride, int pad,
                               int oh, int ow, T* x, int ic) {
  T* xc = x + static_cast<std::size_t>(ic) * h * w;
  for (int ky = 0; ky < kh; ++ky) {
    for (int kx = 0; kx < kw; ++kx) {
      const int r = (ic * kh + ky) * kw + kx;
      const T* cr = col + static_cast<std::size_t>(r) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        T* xrow = xc + static_cast<std::size_t>(iy) * w;
        const T* crow = cr + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * stride - pad + kx;
          if (ix >= 0 && ix < w) xrow[ix] += crow[ox];
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

template <typename T>
void gemm_nn(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  const int nt = detail::clamp_threads(static_cast<std::int64_t>(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) detail::gemm_nn_row(a, b, y, k, n, accumulate, i);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  const int nt = detail::clamp_threads(static_cast<std::int64_t>(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) detail::gemm_nt_row(a, b, y, k, n, accumulate, i);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  const int nt = detail::clamp_threads(static_cast<std::int64_t>(m) * k * n);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int i = 0; i < m; ++i) detail::gemm_tn_row(a, b, y, m, k, n, accumulate, i);
}

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            T* col, int oh, int ow) {
  const int rows = c * kh * kw;
  const int nt = detail::clamp_threads(static_cast<std::int64_t>(rows) * oh * ow);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int r = 0; r < rows; ++r) detail::im2col_row(x, h, w, kh, kw, stride, pad, oh, ow, col, r);
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                T* x, int oh, int ow) {
  const int nt = detail::clamp_threads(static_cast<std::int64_t>(c) * kh * kw * oh * ow);
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
  for (int ic = 0; ic < c; ++ic)
    detail::col2im_add_channel(col, h, w, kh, kw, stride, pad, oh, ow, x, ic);
}

// Single-image NCHW convolution, y[co, oh, ow] = w[co, ci, kh, kw] * x + bias.
// Internally lowered to im2col + gemm so the hot loops are the gemm rows.
template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y,
                    int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm_nn(w, x, y, co, ci, np, false);
  } else {
    auto& col = detail::conv_scratch<T>();
    col.resize(static_cast<std::size_t>(ck) * np);
    im2col(x, ci, h, wd, kh, kw, stride, pad, col.data(), oh, ow);
    gemm_nn(w, col.data(), y, co, ck, np, false);
  }
  if (bias) {
    for (int oc = 0; oc < co; ++oc) {
      T* yr = y + static_cast<std::size_t>(oc) * np;
      const T bv = bias[oc];
      for (int p = 0; p < np; ++p) yr[p] += bv;
    }
  }
}

// dx += w^T * dy, scattered back through the im2col mapping.
template <typename T>
void conv2d_grad_input(const T* dy, const T* w, T* dx,
                       int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm_tn(w, dy, dx, ci, co, np, true);
    return;
  }
  std::vector<T> dcol(static_cast<std::size_t>(ck) * np);
  gemm_tn(w, dy, dcol.data(), ck, co, np, false);
  col2im_add(dcol.data(), ci, h, wd, kh, kw, stride, pad, dx, oh, ow);
}

// dw += dy * col(x)^T; db += row sums of dy.
template <typename T>
void conv2d_grad_params(const T* dy, const T* x, T* dw, T* db,
                        int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    gemm_nt(dy, x, dw, co, np, ci, true);
  } else {
    auto& col = detail::conv_scratch<T>();
    col.resize(static_cast<std::size_t>(ck) * np);
    im2col(x, ci, h, wd, kh, kw, stride, pad, col.data(), oh, ow);
    gemm_nt(dy, col.data(), dw, co, np, ck, true);
  }
  if (db) {
    for (int oc = 0; oc < co; ++oc) {
      const T* dyr = dy + static_cast<std::size_t>(oc) * np;
      T s = T(0);
      for (int p = 0; p < np; ++p) s += dyr[p];
      db[oc] += s;
    }
  }
}

// Serial reference implementations.  Same per-row routines, no OpenMP.
namespace serial {

template <typename T>
void gemm_nn(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) detail::gemm_nn_row(a, b, y, k, n, accumulate, i);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) detail::gemm_nt_row(a, b, y, k, n, accumulate, i);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* y, int m, int k, int n, bool accumulate = false) {
  for (int i = 0; i < m; ++i) detail::gemm_tn_row(a, b, y, m, k, n, accumulate, i);
}

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            T* col, int oh, int ow) {
  for (int r = 0; r < c * kh * kw; ++r)
    detail::im2col_row(x, h, w, kh, kw, stride, pad, oh, ow, col, r);
}

template <typename T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                T* x, int oh, int ow) {
  for (int ic = 0; ic < c; ++ic)
    detail::col2im_add_channel(col, h, w, kh, kw, stride, pad, oh, ow, x, ic);
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y,
                    int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    serial::gemm_nn(w, x, y, co, ci, np, false);
  } else {
    std::vector<T> col(static_cast<std::size_t>(ck) * np);
    serial::im2col(x, ci, h, wd, kh, kw, stride, pad, col.data(), oh, ow);
    serial::gemm_nn(w, col.data(), y, co, ck, np, false);
  }
  if (bias) {
    for (int oc = 0; oc < co; ++oc) {
      T* yr = y + static_cast<std::size_t>(oc) * np;
      for (int p = 0; p < np; ++p) yr[p] += bias[oc];
    }
  }
}

template <typename T>
void conv2d_grad_input(const T* dy, const T* w, T* dx,
                       int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    serial::gemm_tn(w, dy, dx, ci, co, np, true);
    return;
  }
  std::vector<T> dcol(static_cast<std::size_t>(ck) * np);
  serial::gemm_tn(w, dy, dcol.data(), ck, co, np, false);
  serial::col2im_add(dcol.data(), ci, h, wd, kh, kw, stride, pad, dx, oh, ow);
}

template <typename T>
void conv2d_grad_params(const T* dy, const T* x, T* dw, T* db,
                        int ci, int h, int wd, int co, int kh, int kw, int stride, int pad) {
  const int oh = detail::conv_out_extent(h, kh, stride, pad);
  const int ow = detail::conv_out_extent(wd, kw, stride, pad);
  const int ck = ci * kh * kw;
  const int np = oh * ow;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
    serial::gemm_nt(dy, x, dw, co, np, ci, true);
  } else {
    std::vector<T> col(static_cast<std::size_t>(ck) * np);
    serial::im2col(x, ci, h, wd, kh, kw, stride, pad, col.data(), oh, ow);
    serial::gemm_nt(dy, col.data(), dw, co, np, ck, true);
  }
  if (db) {
    for (int oc = 0; oc < co; ++oc) {
      const T* dyr = dy + static_cast<std::size_t>(oc) * np;
      T s = T(0);
      for (int p = 0; p < np; ++p) s += dyr[p];
      db[oc] += s;
    }
  }
}

}  // namespace serial

}  // namespace grsn::kernels
