#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "gpn/tensor.hpp"

// Differentiable operations. Each takes the tape first; on a non-recording
// tape (or when no input requires grad) nothing is recorded.
namespace gpn::ops {

using Rng = std::mt19937_64;

enum class UpsampleMode { nearest, subpixel };

// [batch, in] x [in, out] + [out] -> [batch, out]
template <typename T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights,
                const Tensor<T>& bias);

// Same-padded, stride-1 cross-correlation.
// [batch, cin, h, w] * [cout, cin, k, k] + [cout] -> [batch, cout, h, w]
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const Tensor<T>& bias);

// [batch, c, h, w] -> [batch, c, 2h, 2w] (nearest) or
// [batch, 4c, h, w] -> [batch, c, 2h, 2w] (subpixel channel shuffle).
template <typename T>
Tensor<T> upsample_double(Tape<T>& tape, const Tensor<T>& input,
                          UpsampleMode mode = UpsampleMode::nearest);

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& input, double slope = 0.01);

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& input);

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& input);

// Softmax over `axis`. Entries whose index along `axis` has mask[i] == 0 get
// probability exactly 0. An empty mask allows every index.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input, std::size_t axis,
                  const std::vector<std::uint8_t>& mask = {});

// Natural log with inputs clamped below at `floor`; clamped entries get no
// gradient and are counted in log_clamp_count().
template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& input, double floor = 1e-8);

std::uint64_t log_clamp_count();
void reset_log_clamp_count();

// Inverted dropout. Identity when !training or rate == 0.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& input, double rate, bool training, Rng& rng);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T factor);

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& input, T offset);

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& input);

// Scalar results have shape {1}.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input);

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& input);

// Sums the last axis: [..., k] -> [...]. Rank-1 input gives shape {1}.
template <typename T>
Tensor<T> sum_last(Tape<T>& tape, const Tensor<T>& input);

// Row-wise pick: [rows, k] with one index per row -> [rows].
template <typename T>
Tensor<T> gather_last(Tape<T>& tape, const Tensor<T>& input, const std::vector<std::size_t>& index);

// Selects slices along axis 0, in the given order (repeats allowed).
template <typename T>
Tensor<T> select_rows(Tape<T>& tape, const Tensor<T>& input, const std::vector<std::size_t>& rows);

// Joins along axis 1: [b, c1, ...] ++ [b, c2, ...] -> [b, c1 + c2, ...].
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// Stacks along axis 0; all parts share the trailing shape.
template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape shape);

}  // namespace gpn::ops
