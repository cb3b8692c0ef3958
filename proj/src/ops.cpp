#include "gpn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace gpn {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace ops {
namespace {

thread_local std::uint64_t g_log_clamps = 0;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(s));
  }
}

// Elementwise unary op with derivative expressed from (x, y).
template <typename T, typename F, typename D>
Tensor<T> unary(Tape<T>& tape, const Tensor<T>& x, F f, D dfdx) {
  auto out = Tensor<T>::zeros(x.shape());
  auto xv = x.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = f(xv[i]);
  if (tape.tracks({&x})) {
    tape.record(out, [x, out, dfdx]() mutable {
      auto g = out.grad();
      auto xg = x.grad();
      auto xv = x.values();
      auto yv = out.values();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * dfdx(xv[i], yv[i]);
    });
  }
  return out;
}

}  // namespace

std::uint64_t log_clamp_count() { return g_log_clamps; }
void reset_log_clamp_count() { g_log_clamps = 0; }

template <typename T>
Tensor<T> dense(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weights,
                const Tensor<T>& bias) {
  require_rank("dense", input.shape(), 2);
  require_rank("dense", weights.shape(), 2);
  if (input.dim(1) != weights.dim(0)) shape_error("dense", input.shape(), weights.shape());
  if (bias.size() != weights.dim(1)) shape_error("dense", weights.shape(), bias.shape());

  const std::size_t batch = input.dim(0), in = weights.dim(0), outn = weights.dim(1);
  auto out = Tensor<T>::zeros({batch, outn});
  {
    auto x = input.values();
    auto w = weights.values();
    auto b = bias.values();
    auto y = out.values();
    for (std::size_t r = 0; r < batch; ++r) {
      T* yr = y.data() + r * outn;
      std::copy(b.begin(), b.end(), yr);
      for (std::size_t i = 0; i < in; ++i) {
        const T xi = x[r * in + i];
        if (xi == T(0)) continue;
        const T* wi = w.data() + i * outn;
        for (std::size_t o = 0; o < outn; ++o) yr[o] += xi * wi[o];
      }
    }
  }
  if (tape.tracks({&input, &weights, &bias})) {
    tape.record(out, [input, weights, bias, out, batch, in, outn]() mutable {
      auto g = out.grad();
      if (input.requires_grad()) {
        auto gx = input.grad();
        auto w = weights.values();
        for (std::size_t r = 0; r < batch; ++r) {
          const T* gr = g.data() + r * outn;
          for (std::size_t i = 0; i < in; ++i) {
            const T* wi = w.data() + i * outn;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t o = 0; o < outn; ++o) acc += gr[o] * wi[o];
            gx[r * in + i] += acc;
          }
        }
      }
      if (weights.requires_grad()) {
        auto gw = weights.grad();
        auto x = input.values();
        for (std::size_t r = 0; r < batch; ++r) {
          const T* gr = g.data() + r * outn;
          for (std::size_t i = 0; i < in; ++i) {
            const T xi = x[r * in + i];
            if (xi == T(0)) continue;
            T* gwi = gw.data() + i * outn;
            for (std::size_t o = 0; o < outn; ++o) gwi[o] += xi * gr[o];
          }
        }
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t o = 0; o < outn; ++o) gb[o] += g[r * outn + o];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels,
                 const Tensor<T>& bias) {
  require_rank("conv2d", input.shape(), 4);
  require_rank("conv2d", kernels.shape(), 4);
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != cin) shape_error("conv2d", input.shape(), kernels.shape());
  if (kernels.dim(3) != k) {
    throw std::invalid_argument("conv2d: kernels must be square, got " +
                                shape_str(kernels.shape()));
  }
  if (k % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel size must be odd, got " + std::to_string(k));
  }
  if (bias.size() != cout) shape_error("conv2d", kernels.shape(), bias.shape());

  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  const std::size_t plane = h * w;
  const std::size_t taps = cin * k * k;
  const std::size_t cols_w = batch * plane;

  // Zero-padded patch matrix over the whole batch: row (ci, ky, kx), column (n, pixel).
  auto im2col = [=](const T* x, std::vector<T>& cols) {
    cols.assign(taps * cols_w, T(0));
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (long ky = 0; ky < static_cast<long>(k); ++ky)
        for (long kx = 0; kx < static_cast<long>(k); ++kx) {
          const long dy = ky - pad, dx = kx - pad;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          T* row = cols.data() +
                   ((ci * k + static_cast<std::size_t>(ky)) * k + static_cast<std::size_t>(kx)) * cols_w;
          for (std::size_t n = 0; n < batch; ++n)
            for (long yy = std::max(0L, -dy); yy < std::min(H, H - dy); ++yy) {
              const T* src = x + (n * cin + ci) * plane + (yy + dy) * W + dx;
              T* dst = row + n * plane + yy * W;
              for (long xx = x0; xx < x1; ++xx) dst[xx] = src[xx];
            }
        }
  };

  auto out = Tensor<T>::zeros({batch, cout, h, w});
  {
    auto x = input.values();
    auto kv = kernels.values();
    auto b = bias.values();
    auto y = out.values();
    std::vector<T> cols, acc(cols_w);
    im2col(x.data(), cols);
    for (std::size_t co = 0; co < cout; ++co) {
      std::fill(acc.begin(), acc.end(), b[co]);
      const T* kc = kv.data() + co * taps;
      for (std::size_t r = 0; r < taps; ++r) {
        const T kval = kc[r];
        if (kval == T(0)) continue;
        const T* cr = cols.data() + r * cols_w;
        for (std::size_t p = 0; p < cols_w; ++p) acc[p] += kval * cr[p];
      }
      for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(acc.data() + n * plane, plane, y.data() + (n * cout + co) * plane);
      }
    }
  }
  if (tape.tracks({&input, &kernels, &bias})) {
    tape.record(out, [=]() mutable {
      auto g = out.grad();
      const bool need_x = input.requires_grad();
      const bool need_k = kernels.requires_grad();
      auto x = input.values();
      auto kv = kernels.values();
      // Output gradient regrouped as [cout, (n, pixel)].
      std::vector<T> gt(cout * cols_w);
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t co = 0; co < cout; ++co) {
          std::copy_n(g.data() + (n * cout + co) * plane, plane, gt.data() + co * cols_w + n * plane);
        }
      if (need_k) {
        auto gk = kernels.grad();
        std::vector<T> cols;
        im2col(x.data(), cols);
        for (std::size_t co = 0; co < cout; ++co) {
          const T* go = gt.data() + co * cols_w;
          for (std::size_t r = 0; r < taps; ++r) {
            const T* cr = cols.data() + r * cols_w;
            T acc = 0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t p = 0; p < cols_w; ++p) acc += cr[p] * go[p];
            gk[co * taps + r] += acc;
          }
        }
      }
      if (need_x) {
        auto gx = input.grad();
        std::vector<T> gcols(taps * cols_w, T(0));
        for (std::size_t co = 0; co < cout; ++co) {
          const T* go = gt.data() + co * cols_w;
          const T* kc = kv.data() + co * taps;
          for (std::size_t r = 0; r < taps; ++r) {
            const T kval = kc[r];
            if (kval == T(0)) continue;
            T* gr = gcols.data() + r * cols_w;
            for (std::size_t p = 0; p < cols_w; ++p) gr[p] += kval * go[p];
          }
        }
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < static_cast<long>(k); ++ky)
            for (long kx = 0; kx < static_cast<long>(k); ++kx) {
              const long dy = ky - pad, dx = kx - pad;
              const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
              const T* row = gcols.data() +
                             ((ci * k + static_cast<std::size_t>(ky)) * k + static_cast<std::size_t>(kx)) * cols_w;
              for (std::size_t n = 0; n < batch; ++n)
                for (long yy = std::max(0L, -dy); yy < std::min(H, H - dy); ++yy) {
                  T* dst = gx.data() + (n * cin + ci) * plane + (yy + dy) * W + dx;
                  const T* src = row + n * plane + yy * W;
                  for (long xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
                }
            }
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t co = 0; co < cout; ++co) {
          const T* go = gt.data() + co * cols_w;
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (std::size_t i = 0; i < cols_w; ++i) acc += go[i];
          gb[co] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_double(Tape<T>& tape, const Tensor<T>& input, UpsampleMode mode) {
  require_rank("upsample_double", input.shape(), 4);
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c = mode == UpsampleMode::nearest ? cin : cin / 4;
  if (mode == UpsampleMode::subpixel && cin % 4 != 0) {
    throw std::invalid_argument("upsample_double: subpixel mode needs channels divisible by 4, got " +
                                std::to_string(cin));
  }
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto out = Tensor<T>::zeros({batch, c, oh, ow});

  // Source index in the input for each output element.
  auto source = [=](std::size_t n, std::size_t ch, std::size_t y, std::size_t x) {
    if (mode == UpsampleMode::nearest) {
      return ((n * cin + ch) * h + y / 2) * w + x / 2;
    }
    const std::size_t sub = (y % 2) * 2 + (x % 2);
    return ((n * cin + ch * 4 + sub) * h + y / 2) * w + x / 2;
  };

  auto xv = input.values();
  auto yv = out.values();
  std::size_t idx = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) yv[idx++] = xv[source(n, ch, y, x)];

  if (tape.tracks({&input})) {
    tape.record(out, [=]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      std::size_t i = 0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) gx[source(n, ch, y, x)] += g[i++];
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(Tape<T>& tape, const Tensor<T>& input, double slope) {
  const T a = static_cast<T>(slope);
  return unary(
      tape, input, [a](T v) { return v > T(0) ? v : a * v; },
      [a](T v, T) { return v > T(0) ? T(1) : a; });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& input) {
  return unary(
      tape, input, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& input) {
  return unary(
      tape, input, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input, std::size_t axis,
                  const std::vector<std::uint8_t>& mask) {
  const Shape& s = input.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(s));
  }
  const std::size_t k = s[axis];
  if (!mask.empty() && mask.size() != k) {
    throw std::invalid_argument("softmax: mask has " + std::to_string(mask.size()) +
                                " entries for axis of size " + std::to_string(k));
  }
  if (!mask.empty() && std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; })) {
    throw std::invalid_argument("softmax: mask allows no entries");
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  auto allowed = [&mask](std::size_t j) { return mask.empty() || mask[j] != 0; };

  auto out = Tensor<T>::zeros(s);
  auto xv = input.values();
  auto yv = out.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * k * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < k; ++j)
        if (allowed(j)) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const T e = allowed(j) ? std::exp(xv[base + j * inner] - mx) : T(0);
        yv[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < k; ++j) yv[base + j * inner] /= z;
    }
  }
  if (tape.tracks({&input})) {
    tape.record(out, [=]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      auto yv = out.values();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * k * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < k; ++j) dot += g[base + j * inner] * yv[base + j * inner];
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t i = base + j * inner;
            gx[i] += yv[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& input, double floor) {
  const T f = static_cast<T>(floor);
  std::uint64_t clamped = 0;
  for (T v : input.values())
    if (!(v >= f)) ++clamped;
  g_log_clamps += clamped;
  return unary(
      tape, input, [f](T v) { return std::log(v >= f ? v : f); },
      [f](T v, T) { return v >= f ? T(1) / v : T(0); });
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& input, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0) || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return input;
  std::bernoulli_distribution keep(1.0 - rate);
  const T survivor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factor(input.size());
  for (auto& f : factor) f = keep(rng) ? survivor : T(0);

  auto out = Tensor<T>::zeros(input.shape());
  auto xv = input.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = xv[i] * factor[i];
  if (tape.tracks({&input})) {
    tape.record(out, [input, out, factor = std::move(factor)]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] - bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  auto out = Tensor<T>::zeros(a.shape());
  auto av = a.values(), bv = b.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] * bv[i];
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto bv = b.values();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto av = a.values();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T factor) {
  return unary(
      tape, input, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& input, T offset) {
  return unary(
      tape, input, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& input) {
  return unary(
      tape, input, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input) {
  T acc = 0;
  for (T v : input.values()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (tape.tracks({&input})) {
    tape.record(out, [input, out]() mutable {
      const T g = out.grad()[0];
      for (auto& gx : input.grad()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& input) {
  return scale(tape, sum(tape, input), T(1) / static_cast<T>(input.size()));
}

template <typename T>
Tensor<T> sum_last(Tape<T>& tape, const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.empty()) throw std::invalid_argument("sum_last: rank-0 input");
  const std::size_t k = s.back();
  Shape os(s.begin(), s.end() - 1);
  if (os.empty()) os = {1};
  const std::size_t rows = input.size() / k;
  auto out = Tensor<T>::zeros(os);
  auto xv = input.values();
  auto yv = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) acc += xv[r * k + j];
    yv[r] = acc;
  }
  if (tape.tracks({&input})) {
    tape.record(out, [input, out, rows, k]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_last(Tape<T>& tape, const Tensor<T>& input, const std::vector<std::size_t>& index) {
  require_rank("gather_last", input.shape(), 2);
  const std::size_t rows = input.dim(0), k = input.dim(1);
  if (index.size() != rows) {
    throw std::invalid_argument("gather_last: " + std::to_string(index.size()) +
                                " indices for shape " + shape_str(input.shape()));
  }
  for (auto i : index)
    if (i >= k) throw std::out_of_range("gather_last: index " + std::to_string(i));
  auto out = Tensor<T>::zeros({rows});
  auto xv = input.values();
  auto yv = out.values();
  for (std::size_t r = 0; r < rows; ++r) yv[r] = xv[r * k + index[r]];
  if (tape.tracks({&input})) {
    tape.record(out, [input, out, index, k]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t r = 0; r < index.size(); ++r) gx[r * k + index[r]] += g[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> select_rows(Tape<T>& tape, const Tensor<T>& input, const std::vector<std::size_t>& rows) {
  const Shape& s = input.shape();
  if (s.empty()) throw std::invalid_argument("select_rows: rank-0 input");
  const std::size_t stride = input.size() / s[0];
  for (auto r : rows)
    if (r >= s[0]) throw std::out_of_range("select_rows: row " + std::to_string(r));
  Shape os = s;
  os[0] = rows.size();
  auto out = Tensor<T>::zeros(os);
  auto xv = input.values();
  auto yv = out.values();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.data() + rows[i] * stride, stride, yv.data() + i * stride);
  if (tape.tracks({&input})) {
    tape.record(out, [input, out, rows, stride]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < stride; ++j) gx[rows[i] * stride + j] += g[i * stride + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0];
  for (std::size_t i = 2; ok && i < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) shape_error("concat_channels", sa, sb);
  const std::size_t batch = sa[0];
  const std::size_t na = a.size() / batch, nb = b.size() / batch;
  Shape os = sa;
  os[1] = sa[1] + sb[1];
  auto out = Tensor<T>::zeros(os);
  auto av = a.values(), bv = b.values();
  auto yv = out.values();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(av.data() + n * na, na, yv.data() + n * (na + nb));
    std::copy_n(bv.data() + n * nb, nb, yv.data() + n * (na + nb) + na);
  }
  if (tape.tracks({&a, &b})) {
    tape.record(out, [a, b, out, batch, na, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < na; ++i) ga[n * na + i] += g[n * (na + nb) + i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t i = 0; i < nb; ++i) gb[n * nb + i] += g[n * (na + nb) + na + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Shape& s0 = parts.front().shape();
  Shape os = s0;
  os[0] = 0;
  bool track = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(s.begin() + 1, s.end(), s0.begin() + 1)) {
      shape_error("concat_rows", s0, s);
    }
    os[0] += s[0];
    track = track || tape.tracks({&p});
  }
  auto out = Tensor<T>::zeros(os);
  auto yv = out.values();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), yv.begin() + static_cast<long>(offset));
    offset += p.size();
  }
  if (track) {
    tape.record(out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p.size();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.size()) shape_error("reshape", input.shape(), shape);
  auto out = Tensor<T>::from(std::move(shape), std::vector<T>(input.values().begin(), input.values().end()));
  if (tape.tracks({&input})) {
    tape.record(out, [input, out]() mutable {
      auto g = out.grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

#define GPN_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> dense(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> upsample_double(Tape<T>&, const Tensor<T>&, UpsampleMode);                 \
  template Tensor<T> leaky_relu(Tape<T>&, const Tensor<T>&, double);                            \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                       \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, std::size_t,                           \
                             const std::vector<std::uint8_t>&);                                 \
  template Tensor<T> log(Tape<T>&, const Tensor<T>&, double);                                   \
  template Tensor<T> dropout(Tape<T>&, const Tensor<T>&, double, bool, Rng&);                   \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                      \
  template Tensor<T> add_scalar(Tape<T>&, const Tensor<T>&, T);                                 \
  template Tensor<T> square(Tape<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sum_last(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> gather_last(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&);  \
  template Tensor<T> select_rows(Tape<T>&, const Tensor<T>&, const std::vector<std::size_t>&);  \
  template Tensor<T> concat_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> concat_rows(Tape<T>&, const std::vector<Tensor<T>>&);                     \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);

GPN_INSTANTIATE_OPS(float)
GPN_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace gpn
