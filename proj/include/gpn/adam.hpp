#pragma once

#include <cmath>
#include <limits>
#include <cstdint>
#include <string>
#include <vector>

#include "gpn/tensor.hpp"

namespace gpn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list. Moments are kept in
// the parameters' precision.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor<T>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    m1_.reserve(params_.size());
    m2_.reserve(params_.size());
    for (const auto& p : params_) {
      m1_.emplace_back(p.size(), T(0));
      m2_.emplace_back(p.size(), T(0));
    }
  }

  // Applies one update from the current grads, then zeroes them. Parameters
  // without a grad buffer are treated as having zero gradient.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T step_size = static_cast<T>(config_.lr / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(config_.eps);
    const T tiny = std::numeric_limits<T>::min();
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& param = params_[p];
      if (!param.has_grad()) continue;
      auto g = param.grad();
      auto w = param.values();
      auto& m = m1_[p];
      auto& v = m2_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        T mi = b1 * m[i] + (T(1) - b1) * g[i];
        T vi = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        // Moments decaying under zero gradients would otherwise turn subnormal,
        // which is very slow on most CPUs.
        mi = std::abs(mi) < tiny ? T(0) : mi;
        vi = vi < tiny ? T(0) : vi;
        m[i] = mi;
        v[i] = vi;
        w[i] -= step_size * mi / (std::sqrt(vi * inv_c2) + eps);
      }
      param.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  std::uint64_t steps() const { return t_; }

  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m1_; }
  std::vector<std::vector<T>>& second_moments() { return m2_; }
  const std::vector<std::vector<T>>& first_moments() const { return m1_; }
  const std::vector<std::vector<T>>& second_moments() const { return m2_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m1_, m2_;
  std::uint64_t t_ = 0;
};

}  // namespace gpn
