#include "gpn/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gpn::agent {

AgentConfig AgentConfig::full_scale() {
  AgentConfig c;
  c.conv_channels = {64};
  c.residual_blocks = 4;
  c.encoding = 512;
  c.recurrent = true;
  return c;
}

template <typename T>
AgentModel<T>::AgentModel(const AgentConfig& config, Rng& rng) : config_(config) {
  if (config_.encoding == 0 || config_.actions == 0) {
    throw std::invalid_argument("agent: encoding size and action count must be positive");
  }
  if (config_.residual_blocks > 0 && config_.conv_channels.empty()) {
    throw std::invalid_argument("agent: residual blocks need at least one conv layer");
  }
  std::size_t channels = config_.tile_channels + 1;
  for (auto out : config_.conv_channels) {
    convs_.emplace_back(channels, out, config_.kernel, rng);
    channels = out;
  }
  for (std::size_t i = 0; i < config_.residual_blocks; ++i) {
    residual_.emplace_back(Conv<T>(channels, channels, config_.kernel, rng),
                           Conv<T>(channels, channels, config_.kernel, rng));
  }
  const std::size_t flat = channels * config_.height * config_.width;
  fc_ = Dense<T>(flat, config_.encoding, rng);
  if (config_.recurrent) gru_ = GruCell<T>(config_.encoding, config_.encoding, rng);
  policy_head_ = Dense<T>(config_.encoding, config_.actions, rng);
  utility_head_ = Dense<T>(config_.encoding, config_.actions, rng);
}

template <typename T>
Tensor<T> AgentModel<T>::trunk(Tape<T>& tape, const Tensor<T>& obs) const {
  const Shape expected{config_.tile_channels + 1, config_.height, config_.width};
  if (obs.rank() != 4 || !std::equal(expected.begin(), expected.end(), obs.shape().begin() + 1)) {
    throw std::invalid_argument("agent: observation batch " + shape_str(obs.shape()) +
                                " does not match [b, " + std::to_string(expected[0]) + ", " +
                                std::to_string(expected[1]) + ", " + std::to_string(expected[2]) +
                                "]");
  }
  const double slope = config_.leaky_slope;
  Tensor<T> x = obs;
  for (const auto& conv : convs_) x = ops::leaky_relu(tape, conv(tape, x), slope);
  for (const auto& [first, second] : residual_) {
    auto y = ops::leaky_relu(tape, first(tape, x), slope);
    y = second(tape, y);
    x = ops::leaky_relu(tape, ops::add(tape, x, y), slope);
  }
  const std::size_t batch = obs.dim(0);
  x = ops::reshape(tape, x, {batch, x.size() / batch});
  return ops::leaky_relu(tape, fc_(tape, x), slope);
}

template <typename T>
Tensor<T> AgentModel<T>::encode(Tape<T>& tape, const Tensor<T>& obs, const Tensor<T>& hidden) const {
  auto x = trunk(tape, obs);
  if (!config_.recurrent) return x;
  auto h = hidden.defined() ? hidden : Tensor<T>::zeros(x.shape());
  if (h.shape() != x.shape()) {
    throw std::invalid_argument("agent: hidden state " + shape_str(h.shape()) +
                                " does not match encoding " + shape_str(x.shape()));
  }
  return gru_(tape, x, h);
}

template <typename T>
Tensor<T> AgentModel<T>::encode_sequence(Tape<T>& tape, const Tensor<T>& obs,
                                         const Tensor<T>& hidden) const {
  auto x = trunk(tape, obs);
  if (!config_.recurrent) return x;
  auto h = hidden.defined() ? hidden : Tensor<T>::zeros({1, config_.encoding});
  std::vector<Tensor<T>> rows;
  rows.reserve(x.dim(0));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    h = gru_(tape, ops::select_rows(tape, x, {i}), h);
    rows.push_back(h);
  }
  return ops::concat_rows(tape, rows);
}

template <typename T>
Tensor<T> AgentModel<T>::policy(Tape<T>& tape, const Tensor<T>& encoding) const {
  return ops::softmax(tape, policy_head_(tape, encoding), 1);
}

template <typename T>
Tensor<T> AgentModel<T>::utilities(Tape<T>& tape, const Tensor<T>& encoding) const {
  return utility_head_(tape, encoding);
}

template <typename T>
Tensor<T> AgentModel<T>::state_utility(Tape<T>& tape, const Tensor<T>& encoding) const {
  return ops::sum_last(tape, ops::mul(tape, policy(tape, encoding), utilities(tape, encoding)));
}

template <typename T>
NamedParams<T> AgentModel<T>::named_parameters() const {
  NamedParams<T> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(out, "enc.conv" + std::to_string(i));
  for (std::size_t i = 0; i < residual_.size(); ++i) {
    residual_[i].first.collect(out, "enc.res" + std::to_string(i) + ".a");
    residual_[i].second.collect(out, "enc.res" + std::to_string(i) + ".b");
  }
  fc_.collect(out, "enc.fc");
  if (config_.recurrent) gru_.collect(out, "enc.gru");
  policy_head_.collect(out, "pi");
  utility_head_.collect(out, "q");
  return out;
}

namespace {

template <typename T>
std::vector<Tensor<T>> with_prefix(const NamedParams<T>& named, std::string_view prefix) {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : named)
    if (name.starts_with(prefix)) out.push_back(t);
  return out;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> AgentModel<T>::encoder_parameters() const {
  return with_prefix(named_parameters(), "enc.");
}
template <typename T>
std::vector<Tensor<T>> AgentModel<T>::policy_parameters() const {
  return with_prefix(named_parameters(), "pi.");
}
template <typename T>
std::vector<Tensor<T>> AgentModel<T>::utility_parameters() const {
  return with_prefix(named_parameters(), "q.");
}
template <typename T>
std::vector<Tensor<T>> AgentModel<T>::parameters() const {
  return tensors_of(named_parameters());
}

ActionDistribution make_distribution(std::vector<double> probs) {
  ActionDistribution d;
  d.entropy = 0.0;
  for (double p : probs)
    if (p > 0.0) d.entropy -= p * std::log(p);
  d.probs = std::move(probs);
  return d;
}

std::size_t act(const ActionDistribution& dist, Rng& rng, ActMode mode) {
  const auto& p = dist.probs;
  if (p.empty()) throw std::invalid_argument("act: empty distribution");
  if (mode == ActMode::greedy) {
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  const double u = unit(rng) * total;
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_positive = i;
    cumulative += p[i];
    if (u < cumulative) return i;
  }
  return last_positive;
}

TransitionRecord evaluate_transition(std::span<const double> pi, std::span<const double> q,
                                     std::size_t action, double reward,
                                     std::span<const double> next_pi,
                                     std::span<const double> next_q, bool terminal) {
  if (pi.size() != q.size() || action >= pi.size()) {
    throw std::invalid_argument("evaluate_transition: inconsistent head sizes or action");
  }
  TransitionRecord r;
  r.action = action;
  r.reward = reward;
  r.terminal = terminal;
  r.q_taken = q[action];
  if (!terminal) {
    r.next_value = std::inner_product(next_pi.begin(), next_pi.end(), next_q.begin(), 0.0);
  }
  r.delta = reward + r.next_value - r.q_taken;
  r.value = std::inner_product(pi.begin(), pi.end(), q.begin(), 0.0) + pi[action] * r.delta;
  r.advantage = terminal ? reward - r.value : r.next_value - r.value;
  return r;
}

template <typename T>
Tensor<T> stack_observations(std::span<const Tensor<float>> observations) {
  if (observations.empty()) throw std::invalid_argument("stack_observations: no observations");
  const Shape& s = observations.front().shape();
  Shape batch_shape{observations.size()};
  batch_shape.insert(batch_shape.end(), s.begin(), s.end());
  std::vector<T> values;
  values.reserve(shape_numel(batch_shape));
  for (const auto& o : observations) {
    if (o.shape() != s) {
      throw std::invalid_argument("stack_observations: mixed shapes " + shape_str(s) + " and " +
                                  shape_str(o.shape()));
    }
    for (float v : o.values()) values.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from(std::move(batch_shape), std::move(values));
}

template <typename T>
Evaluation<T> evaluate_observation(const AgentModel<T>& model, const Tensor<float>& observation,
                                   std::span<const float> hidden) {
  Tape<T> tape(false);
  auto batch = stack_observations<T>(std::span<const Tensor<float>>(&observation, 1));
  Tensor<T> h0;
  if (!hidden.empty()) {
    h0 = Tensor<T>::from({1, hidden.size()}, std::vector<T>(hidden.begin(), hidden.end()));
  }
  auto enc = model.encode(tape, batch, h0);
  auto pi = model.policy(tape, enc);
  auto q = model.utilities(tape, enc);
  Evaluation<T> out;
  std::vector<double> probs(pi.values().begin(), pi.values().end());
  out.q.assign(q.values().begin(), q.values().end());
  out.utility = std::inner_product(probs.begin(), probs.end(), out.q.begin(), 0.0);
  out.dist = make_distribution(std::move(probs));
  out.hidden.assign(enc.values().begin(), enc.values().end());
  return out;
}

template <typename T>
ActorCriticLearner<T>::ActorCriticLearner(AgentModel<T>& model, const LearnerConfig& config)
    : model_(&model), config_(config) {
  auto value_params = model.utility_parameters();
  auto policy_params = model.policy_parameters();
  for (const auto& p : model.encoder_parameters()) {
    value_params.push_back(p);
    policy_params.push_back(p);
  }
  value_opt_ = Adam<T>(value_params, AdamConfig{config.utility_lr});
  policy_opt_ = Adam<T>(policy_params, AdamConfig{config.policy_lr});
}

template <typename T>
UpdateStats ActorCriticLearner<T>::update(const Segment& seg) {
  const std::size_t k = seg.actions.size();
  if (k == 0) throw std::invalid_argument("actor_critic_update: empty batch");
  if (seg.observations.size() != k + 1 || seg.rewards.size() != k || seg.terminals.size() != k) {
    throw std::invalid_argument("actor_critic_update: segment needs k actions, rewards, terminals "
                                "and k + 1 observations");
  }
  const auto& model = *model_;
  const std::size_t na = model.config().actions;

  Tape<T> tape;
  auto batch = stack_observations<T>(seg.observations);
  Tensor<T> h0;
  if (!seg.initial_hidden.empty()) {
    h0 = Tensor<T>::from({1, seg.initial_hidden.size()},
                         std::vector<T>(seg.initial_hidden.begin(), seg.initial_hidden.end()));
  }
  auto enc = model.encode_sequence(tape, batch, h0);
  auto pi = model.policy(tape, enc);
  auto q = model.utilities(tape, enc);

  UpdateStats stats;
  stats.records.reserve(k);
  std::vector<double> piv(pi.values().begin(), pi.values().end());
  std::vector<double> qv(q.values().begin(), q.values().end());
  std::vector<T> targets(k), advantages(k);
  for (std::size_t i = 0; i < k; ++i) {
    std::span<const double> pi_i(piv.data() + i * na, na), q_i(qv.data() + i * na, na);
    std::span<const double> pi_n(piv.data() + (i + 1) * na, na), q_n(qv.data() + (i + 1) * na, na);
    auto rec = evaluate_transition(pi_i, q_i, seg.actions[i], seg.rewards[i], pi_n, q_n,
                                   seg.terminals[i]);
    targets[i] = static_cast<T>(rec.reward + rec.next_value);
    advantages[i] = static_cast<T>(rec.advantage);
    stats.records.push_back(rec);
  }

  std::vector<std::size_t> rows(k);
  std::iota(rows.begin(), rows.end(), 0);
  auto q_taken = ops::gather_last(tape, ops::select_rows(tape, q, rows), seg.actions);
  auto td = ops::sub(tape, q_taken, Tensor<T>::from({k}, targets));
  auto value_loss = ops::mean(tape, ops::square(tape, td));

  auto pi_rows = ops::select_rows(tape, pi, rows);
  auto log_pi = ops::log(tape, pi_rows);
  auto log_taken = ops::gather_last(tape, log_pi, seg.actions);
  auto entropy = ops::scale(tape, ops::sum_last(tape, ops::mul(tape, pi_rows, log_pi)), T(-1));
  auto objective =
      ops::add(tape, ops::mean(tape, ops::mul(tape, Tensor<T>::from({k}, advantages), log_taken)),
               ops::scale(tape, ops::mean(tape, entropy), static_cast<T>(config_.entropy_coef)));
  auto policy_loss = ops::scale(tape, objective, T(-1));

  stats.value_loss = static_cast<double>(value_loss.item());
  stats.policy_loss = static_cast<double>(policy_loss.item());
  double ent = 0.0;
  for (T e : entropy.values()) ent += static_cast<double>(e);
  stats.entropy = ent / static_cast<double>(k);

  // The shared encoder receives both gradients, each through its own Adam.
  tape.backward(value_loss);
  auto encoder = model.encoder_parameters();
  std::vector<std::vector<T>> value_grads;
  value_grads.reserve(encoder.size());
  for (auto& p : encoder) {
    auto g = p.grad();
    value_grads.emplace_back(g.begin(), g.end());
    p.zero_grad();
  }
  tape.backward(policy_loss);
  policy_opt_.step();
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    auto g = encoder[i].grad();
    std::copy(value_grads[i].begin(), value_grads[i].end(), g.begin());
  }
  value_opt_.step();
  return stats;
}

template class AgentModel<float>;
template class AgentModel<double>;
template class ActorCriticLearner<float>;
template class ActorCriticLearner<double>;
template Tensor<float> stack_observations<float>(std::span<const Tensor<float>>);
template Tensor<double> stack_observations<double>(std::span<const Tensor<float>>);
template Evaluation<float> evaluate_observation(const AgentModel<float>&, const Tensor<float>&,
                                                std::span<const float>);
template Evaluation<double> evaluate_observation(const AgentModel<double>&, const Tensor<float>&,
                                                 std::span<const float>);

}  // namespace gpn::agent
