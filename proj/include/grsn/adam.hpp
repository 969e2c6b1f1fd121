#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "grsn/errors.hpp"
#include "grsn/tensor.hpp"

namespace grsn {

// Adam with bias-corrected moment estimates.  Parameters are updated
// in place; gradients are left untouched by step() and cleared explicitly
// via zero_grad().

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Tensor<T>> params, T lr = T(0.001), T beta1 = T(0.9),
                         T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (params_.empty()) throw UsageError("AdamOptimizer: empty parameter list");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      if (!p.requires_grad()) throw UsageError("AdamOptimizer: parameter does not require gradients");
      m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) {
        throw UsageError("AdamOptimizer: step() before any gradient reached parameter " + std::to_string(i));
      }
      const std::vector<T>& g = p.grad();
      T* w = p.data();
      T* m = m_[i].data();
      T* v = v_[i].data();
      const int n = p.numel();
      for (int j = 0; j < n; ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[static_cast<std::size_t>(j)];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[static_cast<std::size_t>(j)] * g[static_cast<std::size_t>(j)];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

  std::size_t size() const { return params_.size(); }
  const Tensor<T>& param(std::size_t i) const { return params_[i]; }
  std::vector<T>& first_moment(std::size_t i) { return m_[i]; }
  std::vector<T>& second_moment(std::size_t i) { return v_[i]; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  T lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace grsn
