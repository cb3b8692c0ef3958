#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gpn/adam.hpp"
#include "gpn/dungeon.hpp"
#include "gpn/layers.hpp"

namespace gpn::generator {

struct GeneratorConfig {
  std::size_t latent = 64;     // Z
  std::size_t filters = 64;    // F
  std::size_t channels = 6;    // C, tile channels of the output
  std::size_t height = 12;
  std::size_t width = 16;
  std::size_t base_height = 3;  // dense output grid, doubled until H x W
  std::size_t base_width = 4;
  std::size_t kernel = 3;
  double dropout = 0.1;
  double leaky_slope = 0.01;
  ops::UpsampleMode upsample = ops::UpsampleMode::subpixel;
  std::size_t bridge_input = 0;  // when nonzero and != latent: learned D -> Z map
  // Allowed output channels; empty allows every designable tile and masks
  // channels beyond the designable alphabet.
  std::vector<std::uint8_t> mask;

  std::size_t doublings() const;
  std::vector<std::uint8_t> effective_mask() const;
};

// Level-probability generator: dense -> [F, h0, w0], repeated
// {conv, conv, dropout, upsample} to [F, H, W], 1x1 conv to C, masked softmax.
template <typename T>
class GeneratorModel {
 public:
  GeneratorModel(const GeneratorConfig& config, Rng& rng);

  const GeneratorConfig& config() const { return config_; }

  // [m, Z] -> [m, C, H, W], per-cell distributions over tiles.
  Tensor<T> generate(Tape<T>& tape, const Tensor<T>& latents, bool training, Rng& rng) const;

  // Decodes agent encodings [m, D]; passes through the bridge when present.
  Tensor<T> decode(Tape<T>& tape, const Tensor<T>& encodings, bool training, Rng& rng) const;

  NamedParams<T> named_parameters() const;
  std::vector<Tensor<T>> parameters() const { return tensors_of(named_parameters()); }

 private:
  GeneratorConfig config_;
  std::vector<std::uint8_t> mask_;
  Dense<T> bridge_;
  Dense<T> seed_;
  std::vector<std::pair<Conv<T>, Conv<T>>> blocks_;
  Conv<T> to_tiles_;
};

// i.i.d. standard normal [m, Z].
template <typename T>
Tensor<T> sample_latents(std::size_t m, std::size_t latent, Rng& rng);

// Per-cell argmax, lowest channel index on ties. probs is [C, H, W] (or a
// single item of a batch via `item`).
template <typename T>
dungeon::LevelMap discretize_level(const Tensor<T>& probs, std::size_t item = 0);

// Appends a zero has_key plane: [m, C, H, W] -> [m, C+1, H, W].
template <typename T>
Tensor<T> as_observation(Tape<T>& tape, const Tensor<T>& levels);

// Maps observation batches [m, C+1, H, W] to per-sample utilities [m].
template <typename T>
using UtilityFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;
// Maps observation batches [m, C+1, H, W] to encodings [m, D].
template <typename T>
using EncodeFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

struct GeneratorStats {
  double loss = 0.0;
  double mean_abs_utility = 0.0;
};

// Minimizes (1/m) sum_i U(G(z_i))^2 w.r.t. the generator only. `optimizer`
// must cover exactly the generator parameters; the utility's own parameters
// are expected to be frozen by the caller.
template <typename T>
GeneratorStats generator_update(GeneratorModel<T>& gen, Adam<T>& optimizer,
                                const UtilityFn<T>& utility, std::size_t m, Rng& rng);

// Random pairing of 0..m-1 into m/2 disjoint pairs.
std::vector<std::pair<std::size_t, std::size_t>> random_pairing(std::size_t m, Rng& rng);

// Mean squared L2 distance between paired rows of [m, D].
template <typename T>
Tensor<T> paired_distance(Tape<T>& tape, const Tensor<T>& encodings,
                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs);

// Ascends the mean paired encoding distance w.r.t. the generator; returns D.
template <typename T>
double diversity_update(GeneratorModel<T>& gen, Adam<T>& optimizer, const EncodeFn<T>& encode,
                        std::size_t m, Rng& rng);

// Mean per-cell cross-entropy -sum_c S_c log P_c between one-hot tile planes
// and predicted tile probabilities, both [m, C, H, W].
template <typename T>
Tensor<T> reconstruction_loss(Tape<T>& tape, const Tensor<T>& targets, const Tensor<T>& probs);

// Decodes the agent's encoding of observations back to tiles and minimizes
// the reconstruction loss. `optimizer` covers generator and encoder params.
template <typename T>
double reconstruction_update(GeneratorModel<T>& gen, Adam<T>& optimizer, const EncodeFn<T>& encode,
                             const Tensor<T>& observations, Rng& rng);

}  // namespace gpn::generator
