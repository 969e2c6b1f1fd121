#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "grsn/errors.hpp"
#include "grsn/init.hpp"
#include "grsn/tensor.hpp"

namespace grsn {

// Relation-reasoning layer: a grid of cell features is flattened to a
// sequence, tagged with sinusoidal positions, passed through multi-head
// self-attention and a two-layer MLP (both with residual connections, each
// followed by layer normalisation), and reshaped back to a grid.  Cell (y,x)
// of the output can therefore condition on every other cell of the input.

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct ReasoningParams {
  int d = 0;
  int n_heads = 1;
  T ln_eps = T(1e-5);
  bool use_pe = true;
  AttentionParams<T> att;
  MlpParams<T> mlp;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> pe;  // cached encoding for the scale's sequence length; optional

  long param_count() const {
    long n = 0;
    for (const Tensor<T>* t : {&att.wq, &att.bq, &att.wk, &att.bk, &att.wv, &att.bv, &att.wo, &att.bo,
                               &mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2, &ln1_gamma, &ln1_beta, &ln2_gamma,
                               &ln2_beta})
      n += t->numel();
    return n;
  }
};

// Closed form of ReasoningParams::param_count for hidden width 2d:
// four d x d projections with biases, the two MLP layers, and two layer
// norms.
inline long reasoning_param_count(int d) {
  const long dl = d;
  return 8 * dl * dl + 11 * dl;
}

// Per-head attention tensors recorded during a forward pass, for inspection
// and tests.  Values only; recording does not touch the autodiff graph.
template <typename T>
struct AttentionCapture {
  int n = 0;
  int n_heads = 0;
  std::vector<std::vector<T>> logits;   // per head, n*n row-major
  std::vector<std::vector<T>> weights;  // per head, n*n row-major, rows sum to 1
};

// Sinusoidal positional encoding: row i holds interleaved
// sin(i / 10000^(2j/d)), cos(i / 10000^(2j/d)) pairs.
template <typename T>
Tensor<T> positional_encoding(int n, int d) {
  if (n <= 0 || d <= 0) throw ShapeError("positional_encoding: invalid size " + std::to_string(n) + "x" + std::to_string(d));
  if (d % 2 != 0) throw UsageError("positional_encoding: feature width must be even, got " + std::to_string(d));
  Tensor<T> pe({n, d});
  T* p = pe.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; 2 * j < d; ++j) {
      const double freq = std::pow(10000.0, -2.0 * j / static_cast<double>(d));
      const double angle = static_cast<double>(i) * freq;
      p[static_cast<std::size_t>(i) * d + 2 * j] = static_cast<T>(std::sin(angle));
      p[static_cast<std::size_t>(i) * d + 2 * j + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p, int n_heads,
                               AttentionCapture<T>* capture = nullptr) {
  if (x.ndim() != 2) throw ShapeError("multi_head_attention: expected [n,d] input, got " + detail::shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  if (n_heads < 1 || d % n_heads != 0) {
    throw UsageError("multi_head_attention: feature width " + std::to_string(d) + " not divisible into " +
                     std::to_string(n_heads) + " heads");
  }
  const int dk = d / n_heads;
  const T att_scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dk)));

  auto q = add_bias(matmul(x, p.wq), p.bq);
  auto k = add_bias(matmul(x, p.wk), p.bk);
  auto v = add_bias(matmul(x, p.wv), p.bv);

  if (capture) {
    capture->n = n;
    capture->n_heads = n_heads;
    capture->logits.clear();
    capture->weights.clear();
  }

  Tensor<T> heads;
  for (int h = 0; h < n_heads; ++h) {
    auto qh = slice_lastdim(q, h * dk, dk);
    auto kh = slice_lastdim(k, h * dk, dk);
    auto vh = slice_lastdim(v, h * dk, dk);
    auto logits = scale(matmul_nt(qh, kh), att_scale);
    auto attn = softmax_rows(logits);
    if (capture) {
      capture->logits.push_back(logits.values());
      capture->weights.push_back(attn.values());
    }
    auto oh = matmul(attn, vh);
    heads = (h == 0) ? oh : concat_lastdim(heads, oh);
  }
  return add_bias(matmul(heads, p.wo), p.bo);
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& x, const MlpParams<T>& p) {
  auto hidden = relu(add_bias(matmul(x, p.w1), p.b1));
  return add_bias(matmul(hidden, p.w2), p.b2);
}

// Full reasoning block over a [d,H,W] feature grid.
template <typename T>
Tensor<T> reasoning_forward(const Tensor<T>& grid, const ReasoningParams<T>& p,
                            AttentionCapture<T>* capture = nullptr) {
  if (grid.ndim() != 3 || grid.dim(0) != p.d) {
    throw ShapeError("reasoning_forward: grid " + detail::shape_str(grid.shape()) +
                     " does not match feature width " + std::to_string(p.d));
  }
  const int h = grid.dim(1), w = grid.dim(2);
  auto x = flatten_grid(grid);
  if (p.use_pe) {
    if (p.pe.defined() && p.pe.dim(0) == h * w && p.pe.dim(1) == p.d) {
      x = add(x, p.pe);
    } else {
      x = add(x, positional_encoding<T>(h * w, p.d));
    }
  }
  auto attended = multi_head_attention(x, p.att, p.n_heads, capture);
  auto z = layer_norm(add(x, attended), p.ln1_gamma, p.ln1_beta, p.ln_eps);
  auto out_seq = layer_norm(add(z, mlp_forward(z, p.mlp)), p.ln2_gamma, p.ln2_beta, p.ln_eps);
  return rearrange_grid(out_seq, h, w);
}

// Builds trainable reasoning parameters (hidden width 2d) and registers them,
// in a fixed order, with the model's named-parameter list.
template <typename T>
ReasoningParams<T> make_reasoning_params(int d, int n_heads, T ln_eps, bool use_pe, int seq_len,
                                         std::uint64_t seed, const std::string& prefix,
                                         std::vector<std::pair<std::string, Tensor<T>>>& registry) {
  if (n_heads < 1 || d % n_heads != 0) {
    throw UsageError("reasoning params: feature width " + std::to_string(d) + " not divisible into " +
                     std::to_string(n_heads) + " heads");
  }
  ReasoningParams<T> p;
  p.d = d;
  p.n_heads = n_heads;
  p.ln_eps = ln_eps;
  p.use_pe = use_pe;
  const int dh = 2 * d;

  auto reg = [&](const std::string& local, Tensor<T> t) {
    registry.emplace_back(prefix + "." + local, t);
    return t;
  };
  auto proj = [&](const std::string& local) {
    Tensor<T> w({d, d}, true);
    init_xavier_uniform(w, d, d, seed, prefix + "." + local);
    return reg(local, w);
  };
  auto bias = [&](const std::string& local, int len) { return reg(local, Tensor<T>({len}, true)); };

  p.att.wq = proj("wq");
  p.att.bq = bias("bq", d);
  p.att.wk = proj("wk");
  p.att.bk = bias("bk", d);
  p.att.wv = proj("wv");
  p.att.bv = bias("bv", d);
  p.att.wo = proj("wo");
  p.att.bo = bias("bo", d);

  Tensor<T> w1({d, dh}, true);
  init_he_uniform(w1, d, seed, prefix + ".w1");
  p.mlp.w1 = reg("w1", w1);
  p.mlp.b1 = bias("b1", dh);
  Tensor<T> w2({dh, d}, true);
  init_xavier_uniform(w2, dh, d, seed, prefix + ".w2");
  p.mlp.w2 = reg("w2", w2);
  p.mlp.b2 = bias("b2", d);

  auto ones = [&](const std::string& local) {
    Tensor<T> t({d}, true);
    std::fill(t.data(), t.data() + d, T(1));
    return reg(local, t);
  };
  p.ln1_gamma = ones("ln1_gamma");
  p.ln1_beta = bias("ln1_beta", d);
  p.ln2_gamma = ones("ln2_gamma");
  p.ln2_beta = bias("ln2_beta", d);

  if (seq_len > 0) p.pe = positional_encoding<T>(seq_len, d);
  return p;
}

}  // namespace grsn
