#pragma once

#include <cstdint>
#include <vector>

#include "gpn/adam.hpp"
#include "gpn/layers.hpp"

namespace gpn::agent {

struct AgentConfig {
  std::size_t tile_channels = 6;  // observations carry one more plane (has_key)
  std::size_t height = 12;
  std::size_t width = 16;
  std::vector<std::size_t> conv_channels = {16, 16};
  std::size_t residual_blocks = 0;  // each block: two 3x3 convs plus skip
  std::size_t kernel = 3;
  std::size_t encoding = 64;  // D
  std::size_t actions = 5;
  bool recurrent = false;  // GRU after the dense encoding
  double leaky_slope = 0.01;

  // Nine conv layers (stem + four residual blocks), GRU, D = 512.
  static AgentConfig full_scale();
};

struct ActionDistribution {
  std::vector<double> probs;
  double entropy = 0.0;
};

enum class ActMode { sample, greedy };

// Encoder E, policy head pi and utility head Q over a shared encoding.
template <typename T>
class AgentModel {
 public:
  AgentModel(const AgentConfig& config, Rng& rng);

  const AgentConfig& config() const { return config_; }

  // [b, C+1, H, W] -> [b, D]. For a recurrent encoder every row continues
  // from `hidden` ([b, D] or undefined for zeros) independently.
  Tensor<T> encode(Tape<T>& tape, const Tensor<T>& observations,
                   const Tensor<T>& hidden = {}) const;

  // Rows are consecutive steps of one episode starting from `hidden` ([1, D]
  // or undefined). Identical to encode() for a feed-forward encoder.
  Tensor<T> encode_sequence(Tape<T>& tape, const Tensor<T>& observations,
                            const Tensor<T>& hidden = {}) const;

  Tensor<T> policy(Tape<T>& tape, const Tensor<T>& encoding) const;     // [b, |A|] softmax
  Tensor<T> utilities(Tape<T>& tape, const Tensor<T>& encoding) const;  // [b, |A|] raw Q
  // U = sum_a pi(a) Q(a), per row: [b].
  Tensor<T> state_utility(Tape<T>& tape, const Tensor<T>& encoding) const;

  NamedParams<T> named_parameters() const;
  std::vector<Tensor<T>> encoder_parameters() const;
  std::vector<Tensor<T>> policy_parameters() const;
  std::vector<Tensor<T>> utility_parameters() const;
  std::vector<Tensor<T>> parameters() const;

 private:
  Tensor<T> trunk(Tape<T>& tape, const Tensor<T>& observations) const;

  AgentConfig config_;
  std::vector<Conv<T>> convs_;
  std::vector<std::pair<Conv<T>, Conv<T>>> residual_;
  Dense<T> fc_;
  GruCell<T> gru_;
  Dense<T> policy_head_;
  Dense<T> utility_head_;
};

ActionDistribution make_distribution(std::vector<double> probs);

// Greedy picks the argmax with the lowest index on ties.
std::size_t act(const ActionDistribution& dist, Rng& rng, ActMode mode);

// Scalar quantities of one transition under the gamma = 1 bootstrap.
struct TransitionRecord {
  std::size_t action = 0;
  double reward = 0.0;
  bool terminal = false;
  double q_taken = 0.0;     // Q(A|H)
  double next_value = 0.0;  // V' = pi(.|H') . Q(.|H'), 0 when terminal
  double delta = 0.0;       // R + V' - Q(A|H)
  double value = 0.0;       // pi(.|H) . Q(.|H) + pi(A|H) delta
  double advantage = 0.0;   // V' - V, or R - V when terminal
};

TransitionRecord evaluate_transition(std::span<const double> pi, std::span<const double> q,
                                     std::size_t action, double reward,
                                     std::span<const double> next_pi,
                                     std::span<const double> next_q, bool terminal);

// Consecutive transitions of one episode: observations has one more entry
// than actions (the state after the last action).
struct Segment {
  std::vector<Tensor<float>> observations;
  std::vector<std::size_t> actions;
  std::vector<double> rewards;
  std::vector<bool> terminals;
  std::vector<float> initial_hidden;  // recurrent encoder state before step 0
};

struct UpdateStats {
  double value_loss = 0.0;
  double policy_loss = 0.0;
  double entropy = 0.0;
  std::vector<TransitionRecord> records;
};

struct LearnerConfig {
  double policy_lr = 2.5e-4;   // alpha^pi
  double utility_lr = 2.5e-5;  // alpha^Q
  double entropy_coef = 0.01;  // beta
};

// Applies the value update (omega, psi) and the policy update (theta, psi),
// each with its own Adam state.
template <typename T>
class ActorCriticLearner {
 public:
  ActorCriticLearner(AgentModel<T>& model, const LearnerConfig& config);

  UpdateStats update(const Segment& segment);

  Adam<T>& value_optimizer() { return value_opt_; }
  Adam<T>& policy_optimizer() { return policy_opt_; }
  const LearnerConfig& config() const { return config_; }

 private:
  AgentModel<T>* model_;
  LearnerConfig config_;
  Adam<T> value_opt_;
  Adam<T> policy_opt_;
};

// Stacks [C+1, H, W] observations into a [n, C+1, H, W] batch.
template <typename T>
Tensor<T> stack_observations(std::span<const Tensor<float>> observations);

// Distribution and utility of a single observation without recording.
template <typename T>
struct Evaluation {
  ActionDistribution dist;
  std::vector<double> q;
  double utility = 0.0;
  std::vector<float> hidden;  // encoder output (carried state when recurrent)
};

template <typename T>
Evaluation<T> evaluate_observation(const AgentModel<T>& model, const Tensor<float>& observation,
                                   std::span<const float> hidden = {});

}  // namespace gpn::agent
