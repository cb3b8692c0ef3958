#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gpn/ops.hpp"

namespace gpn {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
template <typename T>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
struct Dense {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : weight(init_uniform<T>({in, out}, in, rng)), bias(init_uniform<T>({out}, in, rng)) {}

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return ops::dense(tape, x, weight, bias);
  }
  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", weight);
    out.emplace_back(prefix + ".b", bias);
  }
};

template <typename T>
struct Conv {
  Tensor<T> kernel;  // [out, in, k, k]
  Tensor<T> bias;    // [out]

  Conv() = default;
  Conv(std::size_t in, std::size_t out, std::size_t k, Rng& rng)
      : kernel(init_uniform<T>({out, in, k, k}, in * k * k, rng)),
        bias(init_uniform<T>({out}, in * k * k, rng)) {}

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return ops::conv2d(tape, x, kernel, bias);
  }
  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".w", kernel);
    out.emplace_back(prefix + ".b", bias);
  }
};

// Gated recurrent unit over row vectors: h' = n + z * (h - n).
template <typename T>
struct GruCell {
  Dense<T> update_x, update_h, reset_x, reset_h, cand_x, cand_h;

  GruCell() = default;
  GruCell(std::size_t in, std::size_t hidden, Rng& rng)
      : update_x(in, hidden, rng),
        update_h(hidden, hidden, rng),
        reset_x(in, hidden, rng),
        reset_h(hidden, hidden, rng),
        cand_x(in, hidden, rng),
        cand_h(hidden, hidden, rng) {}

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& h) const {
    auto z = ops::sigmoid(tape, ops::add(tape, update_x(tape, x), update_h(tape, h)));
    auto r = ops::sigmoid(tape, ops::add(tape, reset_x(tape, x), reset_h(tape, h)));
    auto n = ops::tanh(tape, ops::add(tape, cand_x(tape, x), ops::mul(tape, r, cand_h(tape, h))));
    return ops::add(tape, n, ops::mul(tape, z, ops::sub(tape, h, n)));
  }
  void collect(NamedParams<T>& out, const std::string& prefix) const {
    update_x.collect(out, prefix + ".zx");
    update_h.collect(out, prefix + ".zh");
    reset_x.collect(out, prefix + ".rx");
    reset_h.collect(out, prefix + ".rh");
    cand_x.collect(out, prefix + ".nx");
    cand_h.collect(out, prefix + ".nh");
  }
};

template <typename T>
std::vector<Tensor<T>> tensors_of(const NamedParams<T>& named) {
  std::vector<Tensor<T>> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

}  // namespace gpn
