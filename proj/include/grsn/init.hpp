#pragma once

#include <cmath>
#include <string>

#include "grsn/rng.hpp"
#include "grsn/tensor.hpp"

namespace grsn {

// Parameter initialisation.  Each parameter's stream is seeded from the run
// seed combined with a hash of the parameter's name, so a given named
// parameter receives identical initial values regardless of which other
// parameters exist in the model.  Model variants that share a trunk
// therefore start from identical trunk weights.

inline std::uint64_t param_seed(std::uint64_t seed, const std::string& name) {
  return splitmix64(seed ^ fnv1a64(name));
}

// Uniform(-bound, bound) fan-in scaled init for layers followed by a
// (leaky) rectifier.
template <typename T>
void init_he_uniform(Tensor<T>& w, int fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng(param_seed(seed, name));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  T* d = w.data();
  for (int i = 0; i < w.numel(); ++i) d[i] = static_cast<T>(rng.uniform(-bound, bound));
}

// Uniform(-bound, bound) fan-average scaled init for linear projections.
template <typename T>
void init_xavier_uniform(Tensor<T>& w, int fan_in, int fan_out, std::uint64_t seed, const std::string& name) {
  Rng rng(param_seed(seed, name));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  T* d = w.data();
  for (int i = 0; i < w.numel(); ++i) d[i] = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace grsn
