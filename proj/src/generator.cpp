#include "gpn/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gpn::generator {

std::size_t GeneratorConfig::doublings() const {
  if (base_height == 0 || base_width == 0) throw std::invalid_argument("generator: empty base grid");
  std::size_t k = 0;
  std::size_t h = base_height, w = base_width;
  while (h < height) {
    h *= 2;
    w *= 2;
    ++k;
  }
  if (h != height || w != width) {
    throw std::invalid_argument("generator: base grid " + std::to_string(base_height) + "x" +
                                std::to_string(base_width) + " does not double into " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  return k;
}

std::vector<std::uint8_t> GeneratorConfig::effective_mask() const {
  if (channels < dungeon::kTileKinds) {
    throw std::invalid_argument("generator: needs at least " + std::to_string(dungeon::kTileKinds) +
                                " channels");
  }
  std::vector<std::uint8_t> out(channels, 0);
  for (std::size_t c = 0; c < dungeon::kTileKinds; ++c) out[c] = 1;
  if (!mask.empty()) {
    if (mask.size() != channels && mask.size() != dungeon::kTileKinds) {
      throw std::invalid_argument("generator: mask has " + std::to_string(mask.size()) +
                                  " entries for " + std::to_string(channels) + " channels");
    }
    for (std::size_t c = 0; c < dungeon::kTileKinds; ++c) out[c] = mask[c] ? 1 : 0;
  }
  if (std::none_of(out.begin(), out.end(), [](auto v) { return v != 0; })) {
    throw std::invalid_argument("generator: mask allows no tile");
  }
  return out;
}

template <typename T>
GeneratorModel<T>::GeneratorModel(const GeneratorConfig& config, Rng& rng)
    : config_(config), mask_(config.effective_mask()) {
  const std::size_t k = config_.doublings();
  const std::size_t f = config_.filters;
  if (config_.bridge_input != 0 && config_.bridge_input != config_.latent) {
    bridge_ = Dense<T>(config_.bridge_input, config_.latent, rng);
  }
  seed_ = Dense<T>(config_.latent, f * config_.base_height * config_.base_width, rng);
  const std::size_t widen = config_.upsample == ops::UpsampleMode::subpixel ? 4 : 1;
  for (std::size_t i = 0; i < k; ++i) {
    blocks_.emplace_back(Conv<T>(f, f, config_.kernel, rng), Conv<T>(f, f * widen, config_.kernel, rng));
  }
  to_tiles_ = Conv<T>(f, config_.channels, 1, rng);

  // He-uniform weights and zero biases keep the latent signal alive through the stack.
  const double hidden_gain = std::sqrt(6.0 / (1.0 + config_.leaky_slope * config_.leaky_slope));
  auto rescale = [](Tensor<T> weight, Tensor<T> bias, double gain) {
    for (auto& v : weight.values()) v = static_cast<T>(v * gain);
    for (auto& v : bias.values()) v = T(0);
  };
  if (bridge_.weight.defined()) rescale(bridge_.weight, bridge_.bias, std::sqrt(3.0));
  rescale(seed_.weight, seed_.bias, hidden_gain);
  for (auto& [first, second] : blocks_) {
    rescale(first.kernel, first.bias, hidden_gain);
    rescale(second.kernel, second.bias, hidden_gain);
  }
  rescale(to_tiles_.kernel, to_tiles_.bias, std::sqrt(3.0));
}

template <typename T>
Tensor<T> GeneratorModel<T>::generate(Tape<T>& tape, const Tensor<T>& z, bool training, Rng& rng) const {
  if (z.rank() != 2 || z.dim(1) != config_.latent) {
    throw std::invalid_argument("generator: latents " + shape_str(z.shape()) + " do not match [m, " +
                                std::to_string(config_.latent) + "]");
  }
  const double slope = config_.leaky_slope;
  const std::size_t m = z.dim(0);
  auto x = ops::leaky_relu(tape, seed_(tape, z), slope);
  x = ops::reshape(tape, x, {m, config_.filters, config_.base_height, config_.base_width});
  for (const auto& [first, second] : blocks_) {
    x = ops::leaky_relu(tape, first(tape, x), slope);
    x = ops::leaky_relu(tape, second(tape, x), slope);
    x = ops::dropout(tape, x, config_.dropout, training, rng);
    x = ops::upsample_double(tape, x, config_.upsample);
  }
  return ops::softmax(tape, to_tiles_(tape, x), 1, mask_);
}

template <typename T>
Tensor<T> GeneratorModel<T>::decode(Tape<T>& tape, const Tensor<T>& encodings, bool training,
                                    Rng& rng) const {
  if (bridge_.weight.defined()) return generate(tape, bridge_(tape, encodings), training, rng);
  return generate(tape, encodings, training, rng);
}

template <typename T>
NamedParams<T> GeneratorModel<T>::named_parameters() const {
  NamedParams<T> out;
  if (bridge_.weight.defined()) bridge_.collect(out, "gen.bridge");
  seed_.collect(out, "gen.seed");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].first.collect(out, "gen.block" + std::to_string(i) + ".a");
    blocks_[i].second.collect(out, "gen.block" + std::to_string(i) + ".b");
  }
  to_tiles_.collect(out, "gen.tiles");
  return out;
}

template <typename T>
Tensor<T> sample_latents(std::size_t m, std::size_t latent, Rng& rng) {
  if (m == 0) throw std::invalid_argument("sample_latents: batch size must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> values(m * latent);
  for (auto& v : values) v = static_cast<T>(normal(rng));
  return Tensor<T>::from({m, latent}, std::move(values));
}

template <typename T>
dungeon::LevelMap discretize_level(const Tensor<T>& probs, std::size_t item) {
  const Shape& s = probs.shape();
  std::size_t c, h, w, offset;
  if (s.size() == 3) {
    c = s[0], h = s[1], w = s[2], offset = 0;
  } else if (s.size() == 4) {
    c = s[1], h = s[2], w = s[3], offset = item * c * h * w;
    if (item >= s[0]) throw std::out_of_range("discretize_level: item out of range");
  } else {
    throw std::invalid_argument("discretize_level: expected [C, H, W], got " + shape_str(s));
  }
  const std::size_t plane = h * w;
  auto v = probs.values();
  dungeon::LevelMap level(static_cast<int>(h), static_cast<int>(w), dungeon::Tile::floor,
                          dungeon::Origin::generated);
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    for (std::size_t ch = 1; ch < c; ++ch)
      if (v[offset + ch * plane + i] > v[offset + best * plane + i]) best = ch;
    const auto tile = best < dungeon::kTileKinds ? static_cast<dungeon::Tile>(best) : dungeon::Tile::floor;
    level.set(static_cast<int>(i / w), static_cast<int>(i % w), tile);
  }
  return level;
}

template <typename T>
Tensor<T> as_observation(Tape<T>& tape, const Tensor<T>& levels) {
  if (levels.rank() != 4) {
    throw std::invalid_argument("as_observation: expected [m, C, H, W], got " + shape_str(levels.shape()));
  }
  auto key_plane = Tensor<T>::zeros({levels.dim(0), 1, levels.dim(2), levels.dim(3)});
  return ops::concat_channels(tape, levels, key_plane);
}

template <typename T>
GeneratorStats generator_update(GeneratorModel<T>& gen, Adam<T>& optimizer,
                                const UtilityFn<T>& utility, std::size_t m, Rng& rng) {
  Tape<T> tape;
  auto z = sample_latents<T>(m, gen.config().latent, rng);
  auto levels = gen.generate(tape, z, true, rng);
  auto u = utility(tape, as_observation(tape, levels));
  if (u.size() != m) {
    throw std::invalid_argument("generator_update: utility returned shape " + shape_str(u.shape()));
  }
  auto loss = ops::mean(tape, ops::square(tape, u));
  GeneratorStats stats;
  stats.loss = static_cast<double>(loss.item());
  for (T v : u.values()) stats.mean_abs_utility += std::abs(static_cast<double>(v));
  stats.mean_abs_utility /= static_cast<double>(m);
  if (loss.is_recorded()) {
    tape.backward(loss);
    optimizer.step();
  }
  return stats;
}

std::vector<std::pair<std::size_t, std::size_t>> random_pairing(std::size_t m, Rng& rng) {
  if (m < 2) throw std::invalid_argument("diversity pairing needs at least 2 samples");
  if (m % 2 != 0) throw std::invalid_argument("diversity pairing needs an even batch, got " + std::to_string(m));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = m - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(m / 2);
  for (std::size_t i = 0; i < m; i += 2) pairs.emplace_back(order[i], order[i + 1]);
  return pairs;
}

template <typename T>
Tensor<T> paired_distance(Tape<T>& tape, const Tensor<T>& encodings,
                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("paired_distance: no pairs");
  std::vector<std::size_t> a, b;
  for (const auto& [i, j] : pairs) {
    a.push_back(i);
    b.push_back(j);
  }
  auto diff = ops::sub(tape, ops::select_rows(tape, encodings, a), ops::select_rows(tape, encodings, b));
  return ops::scale(tape, ops::sum(tape, ops::square(tape, diff)),
                    T(1) / static_cast<T>(pairs.size()));
}

template <typename T>
double diversity_update(GeneratorModel<T>& gen, Adam<T>& optimizer, const EncodeFn<T>& encode,
                        std::size_t m, Rng& rng) {
  auto pairs = random_pairing(m, rng);
  Tape<T> tape;
  auto z = sample_latents<T>(m, gen.config().latent, rng);
  auto levels = gen.generate(tape, z, true, rng);
  auto enc = encode(tape, as_observation(tape, levels));
  auto d = paired_distance(tape, enc, pairs);
  const double value = static_cast<double>(d.item());
  auto loss = ops::scale(tape, d, T(-1));
  if (loss.is_recorded()) {
    tape.backward(loss);
    optimizer.step();
  }
  return value;
}

template <typename T>
Tensor<T> reconstruction_loss(Tape<T>& tape, const Tensor<T>& targets, const Tensor<T>& probs) {
  if (targets.shape() != probs.shape() || probs.rank() != 4) {
    throw std::invalid_argument("reconstruction_loss: shapes " + shape_str(targets.shape()) + " and " +
                                shape_str(probs.shape()));
  }
  const std::size_t cells = probs.dim(0) * probs.dim(2) * probs.dim(3);
  auto ce = ops::sum(tape, ops::mul(tape, targets, ops::log(tape, probs)));
  return ops::scale(tape, ce, T(-1) / static_cast<T>(cells));
}

template <typename T>
double reconstruction_update(GeneratorModel<T>& gen, Adam<T>& optimizer, const EncodeFn<T>& encode,
                             const Tensor<T>& observations, Rng& rng) {
  if (observations.rank() != 4 || observations.dim(1) != gen.config().channels + 1) {
    throw std::invalid_argument("reconstruction_update: observations " +
                                shape_str(observations.shape()) + " need " +
                                std::to_string(gen.config().channels + 1) + " planes");
  }
  const std::size_t m = observations.dim(0), c = gen.config().channels;
  const std::size_t plane = observations.dim(2) * observations.dim(3);
  std::vector<T> tiles;
  tiles.reserve(m * c * plane);
  auto ov = observations.values();
  for (std::size_t n = 0; n < m; ++n) {
    auto begin = ov.begin() + static_cast<long>(n * (c + 1) * plane);
    tiles.insert(tiles.end(), begin, begin + static_cast<long>(c * plane));
  }
  auto targets = Tensor<T>::from({m, c, observations.dim(2), observations.dim(3)}, std::move(tiles));

  Tape<T> tape;
  auto probs = gen.decode(tape, encode(tape, observations), true, rng);
  auto loss = reconstruction_loss(tape, targets, probs);
  const double value = static_cast<double>(loss.item());
  if (loss.is_recorded()) {
    tape.backward(loss);
    optimizer.step();
  }
  return value;
}

#define GPN_INSTANTIATE_GENERATOR(T)                                                                \
  template class GeneratorModel<T>;                                                                 \
  template Tensor<T> sample_latents<T>(std::size_t, std::size_t, Rng&);                             \
  template dungeon::LevelMap discretize_level<T>(const Tensor<T>&, std::size_t);                    \
  template Tensor<T> as_observation<T>(Tape<T>&, const Tensor<T>&);                                 \
  template GeneratorStats generator_update<T>(GeneratorModel<T>&, Adam<T>&, const UtilityFn<T>&,    \
                                              std::size_t, Rng&);                                   \
  template Tensor<T> paired_distance<T>(Tape<T>&, const Tensor<T>&,                                 \
                                        const std::vector<std::pair<std::size_t, std::size_t>>&);   \
  template double diversity_update<T>(GeneratorModel<T>&, Adam<T>&, const EncodeFn<T>&,             \
                                      std::size_t, Rng&);                                           \
  template Tensor<T> reconstruction_loss<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template double reconstruction_update<T>(GeneratorModel<T>&, Adam<T>&, const EncodeFn<T>&,        \
                                           const Tensor<T>&, Rng&);

GPN_INSTANTIATE_GENERATOR(float)
GPN_INSTANTIATE_GENERATOR(double)

}  // namespace gpn::generator
