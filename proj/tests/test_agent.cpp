#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "gpn/agent.hpp"
#include "gpn/dungeon.hpp"
#include "gradcheck.hpp"

using namespace gpn;
using namespace gpn::agent;
using gpn::testing::check_gradients;
using gpn::testing::random_tensor;

namespace {

AgentConfig tiny_config() {
  AgentConfig c;
  c.tile_channels = 2;
  c.height = 3;
  c.width = 4;
  c.conv_channels = {3};
  c.encoding = 5;
  return c;
}

Tensor<float> level_observation(dungeon::Tile fill) {
  dungeon::LevelMap level(12, 16, fill);
  auto planes = level.one_hot();
  auto obs = Tensor<float>::zeros({7, 12, 16});
  std::copy(planes.values().begin(), planes.values().end(), obs.values().begin());
  return obs;
}

double kl_to_uniform(const std::vector<double>& p) {
  double kl = 0.0;
  for (double x : p)
    if (x > 0) kl += x * std::log(x * static_cast<double>(p.size()));
  return kl;
}

std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.values().begin(), p.values().end());
  return out;
}

bool unchanged(const std::vector<Tensor<float>>& params, const std::vector<std::vector<float>>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!std::equal(saved[i].begin(), saved[i].end(), params[i].values().begin())) return false;
  return true;
}

}  // namespace

TEST_CASE("encode") {
  Rng rng(1);
  AgentModel<float> model(AgentConfig{}, rng);
  auto obs = stack_observations<float>(std::vector<Tensor<float>>{level_observation(dungeon::Tile::floor)});
  Tape<float> tape(false);
  auto a = model.encode(tape, obs);
  auto b = model.encode(tape, obs);
  REQUIRE(a.shape() == Shape{1, 64});
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));

  SUBCASE("shape mismatch rejected") {
    auto bad = Tensor<float>::zeros({1, 6, 12, 16});
    CHECK_THROWS_AS(model.encode(tape, bad), std::invalid_argument);
  }
  SUBCASE("all-floor and all-wall encode differently") {
    std::vector<Tensor<float>> obs2{level_observation(dungeon::Tile::floor),
                                    level_observation(dungeon::Tile::wall)};
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      Rng r(seed);
      AgentModel<float> m(AgentConfig{}, r);
      auto h = m.encode(tape, stack_observations<float>(obs2));
      double d2 = 0.0;
      for (std::size_t i = 0; i < 64; ++i) d2 += std::pow(h[i] - h[64 + i], 2);
      CHECK(d2 > 0.0);
    }
  }
}

TEST_CASE("finite differences through the agent") {
  Rng rng(2);
  for (int variant = 0; variant < 3; ++variant) {
    auto cfg = tiny_config();
    if (variant >= 1) cfg.residual_blocks = 1;
    if (variant == 2) cfg.recurrent = true;
    CAPTURE(variant);
    AgentModel<double> model(cfg, rng);
    auto obs = random_tensor({2, 3, 3, 4}, rng, false);
    auto encoder = model.encoder_parameters();

    auto sum_h = [&](Tape<double>& tape) { return ops::sum(tape, model.encode(tape, obs)); };
    CHECK(check_gradients(sum_h, encoder).max_rel_error < 1e-5);

    auto log_prob = [&](Tape<double>& tape) {
      auto pi = model.policy(tape, model.encode(tape, obs));
      return ops::sum(tape, ops::gather_last(tape, ops::log(tape, pi), {1, 3}));
    };
    CHECK(check_gradients(log_prob, model.parameters()).max_rel_error < 1e-5);

    auto seq = [&](Tape<double>& tape) {
      return ops::sum(tape, model.state_utility(tape, model.encode_sequence(tape, obs)));
    };
    CHECK(check_gradients(seq, model.parameters()).max_rel_error < 1e-5);
  }
}

TEST_CASE("heads") {
  Rng rng(3);
  AgentModel<double> model(tiny_config(), rng);
  auto named = model.named_parameters();
  auto h = random_tensor({4, 5}, rng, false);
  Tape<double> tape(false);

  SUBCASE("zero policy weights give the uniform distribution") {
    for (auto& p : model.policy_parameters()) std::fill(p.values().begin(), p.values().end(), 0.0);
    auto pi = model.policy(tape, h);
    for (double p : pi.values()) CHECK(p == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("zero utility weights give zero utilities") {
    for (auto& p : model.utility_parameters()) std::fill(p.values().begin(), p.values().end(), 0.0);
    auto q = model.utilities(tape, h);
    for (double v : q.values()) CHECK(v == 0.0);
  }
  SUBCASE("policy rows are distributions") {
    auto pi = model.policy(tape, random_tensor({50, 5}, rng, false, -20, 20));
    for (std::size_t r = 0; r < 50; ++r) {
      double s = 0;
      for (std::size_t a = 0; a < 5; ++a) {
        CHECK(pi[r * 5 + a] >= 0.0);
        s += pi[r * 5 + a];
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("state utility is the inner product of the heads") {
    for (int trial = 0; trial < 20; ++trial) {
      auto x = random_tensor({3, 5}, rng, false, -3, 3);
      auto u = model.state_utility(tape, x);
      auto pi = model.policy(tape, x);
      auto q = model.utilities(tape, x);
      for (std::size_t r = 0; r < 3; ++r) {
        double dot = 0;
        for (std::size_t a = 0; a < 5; ++a) dot += pi[r * 5 + a] * q[r * 5 + a];
        CHECK(std::abs(u[r] - dot) < 1e-6);
      }
    }
  }
  SUBCASE("degenerate heads") {
    auto& pi_b = named[named.size() - 3].second;  // pi.b
    auto& q_b = named[named.size() - 1].second;   // q.b
    REQUIRE(named[named.size() - 3].first == "pi.b");
    for (auto& p : model.policy_parameters()) std::fill(p.values().begin(), p.values().end(), 0.0);
    for (auto& p : model.utility_parameters()) std::fill(p.values().begin(), p.values().end(), 0.0);
    std::fill(q_b.values().begin(), q_b.values().end(), 1.0);
    CHECK(model.state_utility(tape, h)[0] == doctest::Approx(1.0));
    pi_b[0] = 1000.0;
    q_b[0] = 2.5;
    CHECK(model.state_utility(tape, h)[0] == doctest::Approx(2.5));
  }
}

TEST_CASE("act") {
  Rng rng(4);
  auto degenerate = make_distribution({0, 1, 0, 0, 0});
  for (int i = 0; i < 1000; ++i) CHECK(act(degenerate, rng, ActMode::sample) == 1);
  CHECK(act(make_distribution({0.3, 0.3, 0.2, 0.1, 0.1}), rng, ActMode::greedy) == 0);
  CHECK(act(make_distribution({0.1, 0.3, 0.3, 0.2, 0.1}), rng, ActMode::greedy) == 1);

  auto uniform = make_distribution(std::vector<double>(5, 0.2));
  CHECK(uniform.entropy == doctest::Approx(std::log(5.0)));
  CHECK(degenerate.entropy == 0.0);
  std::vector<int> counts(5, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[act(uniform, rng, ActMode::sample)];
  for (int c : counts) CHECK(std::abs(c / double(draws) - 0.2) <= 0.01);
}

TEST_CASE("evaluate_transition") {
  const std::vector<double> pi{0.2, 0.2, 0.2, 0.2, 0.2};
  std::vector<double> q{0.4, 0.0, 0.0, 0.0, 0.0};
  SUBCASE("terminal delta") {
    auto r = evaluate_transition(pi, q, 0, 1.0, pi, q, true);
    CHECK(r.next_value == 0.0);
    CHECK(r.delta == doctest::Approx(0.6));
  }
  SUBCASE("terminal advantage") {
    // pi.Q = 0.08, delta = 0.6, pi(A) delta = 0.12: V = 0.2.
    auto r = evaluate_transition(pi, q, 0, 1.0, pi, q, true);
    CHECK(r.value == doctest::Approx(0.2));
    CHECK(r.advantage == doctest::Approx(0.8));
  }
  SUBCASE("bootstrap") {
    std::vector<double> next_q{1, 2, 3, 4, 5};
    auto r = evaluate_transition(pi, q, 1, 0.5, pi, next_q, false);
    CHECK(r.next_value == doctest::Approx(3.0));
    CHECK(r.delta == doctest::Approx(3.5));
    CHECK(r.value == doctest::Approx(0.08 + 0.7));
    CHECK(r.advantage == doctest::Approx(3.0 - 0.78));
  }
}

namespace {

// Single-state episodes: arm 0 pays +1, arm 1 pays -1.
void run_bandit(AgentModel<float>& model, ActorCriticLearner<float>& learner, Rng& rng, int updates) {
  auto obs = Tensor<float>::filled({2, 1, 1}, 1.0f);
  for (int u = 0; u < updates; ++u) {
    Segment seg;
    auto eval = evaluate_observation(model, obs);
    for (int i = 0; i < 5; ++i) {
      const auto a = act(eval.dist, rng, ActMode::sample);
      seg.observations.push_back(obs);
      seg.actions.push_back(a);
      seg.rewards.push_back(a == 0 ? 1.0 : -1.0);
      seg.terminals.push_back(true);
    }
    seg.observations.push_back(obs);
    learner.update(seg);
  }
}

AgentConfig bandit_config() {
  AgentConfig c;
  c.tile_channels = 1;
  c.height = 1;
  c.width = 1;
  c.conv_channels = {4};
  c.encoding = 8;
  c.actions = 2;
  return c;
}

}  // namespace

TEST_CASE("two-armed bandit converges") {
  Rng rng(5);
  AgentModel<float> model(bandit_config(), rng);
  LearnerConfig lc;
  lc.utility_lr = 2.5e-3;
  lc.policy_lr = 2.5e-3;
  ActorCriticLearner<float> learner(model, lc);
  run_bandit(model, learner, rng, 5000);
  auto eval = evaluate_observation(model, Tensor<float>::filled({2, 1, 1}, 1.0f));
  CHECK(eval.q[0] == doctest::Approx(1.0).epsilon(0.1));
  CHECK(std::abs(eval.q[1] + 1.0) <= 0.1);
  CHECK(eval.dist.probs[0] >= 0.95);
}

TEST_CASE("update rules") {
  Rng rng(6);
  SUBCASE("empty batch rejected") {
    AgentModel<float> model(bandit_config(), rng);
    ActorCriticLearner<float> learner(model, LearnerConfig{});
    Segment seg;
    seg.observations.push_back(Tensor<float>::filled({2, 1, 1}, 1.0f));
    CHECK_THROWS_AS(learner.update(seg), std::invalid_argument);
  }
  SUBCASE("zero learning rates change nothing") {
    AgentModel<float> model(bandit_config(), rng);
    ActorCriticLearner<float> learner(model, LearnerConfig{0.0, 0.0, 0.01});
    auto before = snapshot(model.parameters());
    run_bandit(model, learner, rng, 20);
    CHECK(unchanged(model.parameters(), before));
  }
  SUBCASE("policy loss never reaches the utility head") {
    AgentModel<float> model(bandit_config(), rng);
    ActorCriticLearner<float> learner(model, LearnerConfig{1e-2, 0.0, 0.01});
    auto before = snapshot(model.utility_parameters());
    auto enc_before = snapshot(model.encoder_parameters());
    run_bandit(model, learner, rng, 20);
    CHECK(unchanged(model.utility_parameters(), before));
    CHECK_FALSE(unchanged(model.encoder_parameters(), enc_before));
  }
  SUBCASE("value loss never reaches the policy head") {
    AgentModel<float> model(bandit_config(), rng);
    ActorCriticLearner<float> learner(model, LearnerConfig{0.0, 1e-2, 0.01});
    auto before = snapshot(model.policy_parameters());
    run_bandit(model, learner, rng, 20);
    CHECK(unchanged(model.policy_parameters(), before));
  }
  SUBCASE("huge entropy bonus pulls the policy toward uniform") {
    auto cfg = bandit_config();
    cfg.actions = 5;
    AgentModel<float> model(cfg, rng);
    auto named = model.named_parameters();
    for (auto& [name, t] : named)
      if (name == "pi.b") t[0] = 2.0f;
    auto obs = Tensor<float>::filled({2, 1, 1}, 1.0f);
    const double before = kl_to_uniform(evaluate_observation(model, obs).dist.probs);
    ActorCriticLearner<float> learner(model, LearnerConfig{1e-2, 0.0, 1e6});
    Segment seg;
    seg.observations = {obs, obs};
    seg.actions = {0};
    seg.rewards = {1.0};
    seg.terminals = {true};
    learner.update(seg);
    const double after = kl_to_uniform(evaluate_observation(model, obs).dist.probs);
    CHECK(after < before);
  }
}

TEST_CASE("three-cell corridor value reaches the start state") {
  using namespace gpn::dungeon;
  Environment env(compile_level(parse_level_text("A+g")), EnvConfig{});
  AgentConfig cfg;
  cfg.height = 1;
  cfg.width = 3;
  cfg.conv_channels = {8};
  cfg.encoding = 16;
  Rng rng(7);
  AgentModel<float> model(cfg, rng);
  LearnerConfig lc;
  lc.policy_lr = 1e-3;
  lc.utility_lr = 1e-3;
  ActorCriticLearner<float> learner(model, lc);

  std::uint64_t episode = 0;
  auto state = env.reset(episode);
  auto obs = env.observe(state);
  for (int update = 0; update < 3000; ++update) {
    Segment seg;
    seg.observations.push_back(obs);
    for (int i = 0; i < 5; ++i) {
      const auto a = act(evaluate_observation(model, obs).dist, rng, ActMode::sample);
      auto out = env.step(state, static_cast<Action>(a));
      seg.actions.push_back(a);
      seg.rewards.push_back(out.reward);
      seg.terminals.push_back(out.terminal);
      obs = out.observation;
      seg.observations.push_back(obs);
      if (out.terminal) {
        state = env.reset(++episode);
        obs = env.observe(state);
        break;
      }
    }
    learner.update(seg);
  }
  const auto start = evaluate_observation(model, env.observe(env.reset(0)));
  CHECK(std::abs(start.utility - 1.0) <= 0.15);
}

TEST_CASE("recurrent preset") {
  Rng rng(8);
  auto cfg = AgentConfig::full_scale();
  CHECK(cfg.recurrent);
  CHECK(cfg.encoding == 512);
  CHECK(cfg.conv_channels.size() + 2 * cfg.residual_blocks == 9);
  AgentModel<float> model(cfg, rng);
  auto obs = level_observation(dungeon::Tile::floor);
  auto first = evaluate_observation(model, obs);
  auto second = evaluate_observation(model, obs, first.hidden);
  CHECK(first.hidden.size() == 512);
  CHECK(first.hidden != second.hidden);
  CHECK(std::abs(std::accumulate(first.dist.probs.begin(), first.dist.probs.end(), 0.0) - 1.0) < 1e-6);
}
