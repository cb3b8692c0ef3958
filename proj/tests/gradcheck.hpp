#pragma once

// Central finite-difference oracle for gradients. Test-only: it evaluates the
// loss through a non-recording tape and never looks at backward rules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gpn/tensor.hpp"

namespace gpn::testing {

using LossFn = std::function<Tensor<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst tensor, norm-wise
  std::size_t checked = 0;
};

// Norm-wise relative error ||a - n|| / (||a|| + ||n||); exact zero when both
// gradients vanish.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  if (denom < 1e-12) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

inline std::vector<double> numeric_gradient(const LossFn& loss, Tensor<double>& param, double h = 1e-6) {
  std::vector<double> out(param.size());
  auto v = param.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    Tape<double> plus(false);
    const double fp = loss(plus).item();
    v[i] = saved - h;
    Tape<double> minus(false);
    const double fm = loss(minus).item();
    v[i] = saved;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

inline GradCheckResult check_gradients(const LossFn& loss, std::vector<Tensor<double>> params,
                                       double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  Tape<double> tape;
  auto l = loss(tape);
  tape.backward(l);
  GradCheckResult result;
  for (auto& p : params) {
    auto g = p.grad();
    std::vector<double> analytic(g.begin(), g.end());
    auto numeric = numeric_gradient(loss, p, h);
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
    result.checked += analytic.size();
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                                    double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace gpn::testing
