#pragma once

#include <string>
#include <utility>
#include <vector>

#include "grsn/reasoning.hpp"
#include "grsn/tensor.hpp"

namespace grsn {

// How the reasoning layer is spliced between the neck and a detection head.
//
//   Baseline   head(neck)
//   Reasoner1  head(conv1x1(reasoning(neck)))          - reasoned features
//              replace the neck features entirely.
//   Reasoner2  head(conv1x1([neck | reasoning(neck)])) - reasoned features
//              are concatenated with the originals and a pointwise conv
//              fuses 2d channels back down to d.

enum class Variant { kBaseline, kReasoner1, kReasoner2 };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kReasoner1: return "reasoner1";
    case Variant::kReasoner2: return "reasoner2";
  }
  return "?";
}

template <typename T>
struct FuseParams {
  Tensor<T> w;  // [d_out, d_in]
  Tensor<T> b;  // [d_out]
};

template <typename T>
FuseParams<T> make_fuse_params(int d_in, int d_out, std::uint64_t seed, const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor<T>>>& registry) {
  FuseParams<T> p;
  p.w = Tensor<T>({d_out, d_in}, true);
  init_xavier_uniform(p.w, d_in, d_out, seed, prefix + ".w");
  p.b = Tensor<T>({d_out}, true);
  registry.emplace_back(prefix + ".w", p.w);
  registry.emplace_back(prefix + ".b", p.b);
  return p;
}

template <typename T>
Tensor<T> reasoner1_forward(const Tensor<T>& neck_grid, const ReasoningParams<T>& rp,
                            const FuseParams<T>& fuse, AttentionCapture<T>* capture = nullptr) {
  return conv1x1(reasoning_forward(neck_grid, rp, capture), fuse.w, fuse.b);
}

template <typename T>
Tensor<T> reasoner2_forward(const Tensor<T>& neck_grid, const ReasoningParams<T>& rp,
                            const FuseParams<T>& fuse, AttentionCapture<T>* capture = nullptr) {
  auto reasoned = reasoning_forward(neck_grid, rp, capture);
  return conv1x1(concat_channels(neck_grid, reasoned), fuse.w, fuse.b);
}

// Trainable-parameter overhead per fused scale of width d, relative to the
// baseline path (reasoning block + the pointwise fuse conv).
inline long reasoner1_param_count(int d) {
  const long dl = d;
  return reasoning_param_count(d) + dl * dl + dl;
}

inline long reasoner2_param_count(int d) {
  const long dl = d;
  return reasoning_param_count(d) + 2 * dl * dl + dl;
}

}  // namespace grsn
