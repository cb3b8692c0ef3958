#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "gpn/trainer.hpp"
#include "gradcheck.hpp"

using namespace gpn;
using gpn::testing::check_gradients;
using gpn::testing::random_tensor;

namespace {

const std::string kFixtures = GPN_FIXTURES_DIR;
const std::string kConfigs = GPN_CONFIGS_DIR;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Tensor<double> project(Tape<double>& tape, const Tensor<double>& x, const Tensor<double>& weights) {
  return ops::sum(tape, ops::mul(tape, x, weights));
}

Verdict autodiff_oracle() {
  double worst = 0.0;
  std::size_t checks = 0;
  const std::uint64_t seeds = 24;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_int_distribution<std::size_t> dim(1, 4);
    const std::size_t b = dim(rng), c = dim(rng), h = dim(rng) + 1, w = dim(rng) + 1, o = dim(rng);
    auto track = [&](const gpn::testing::GradCheckResult& r) {
      worst = std::max(worst, r.max_rel_error);
      ++checks;
    };

    auto x2 = random_tensor({b, c + 1}, rng);
    auto wd = random_tensor({c + 1, o}, rng);
    auto bd = random_tensor({o}, rng);
    auto pd = random_tensor({b, o}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::dense(t, x2, wd, bd), pd); }, {x2, wd, bd}));

    auto x4 = random_tensor({b, c, h, w}, rng);
    const std::size_t k = seed % 2 == 0 ? 3 : 1;
    auto kc = random_tensor({o, c, k, k}, rng);
    auto bc = random_tensor({o}, rng);
    auto pc = random_tensor({b, o, h, w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::conv2d(t, x4, kc, bc), pc); }, {x4, kc, bc}));

    auto pu = random_tensor({b, c, 2 * h, 2 * w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::upsample_double(t, x4), pu); }, {x4}));
    auto x4s = random_tensor({b, 4 * c, h, w}, rng);
    track(check_gradients(
        [&](Tape<double>& t) { return project(t, ops::upsample_double(t, x4s, ops::UpsampleMode::subpixel), pu); },
        {x4s}));

    auto p4 = random_tensor({b, c, h, w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::leaky_relu(t, x4, 0.05), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::sigmoid(t, x4), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::tanh(t, x4), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::softmax(t, x4, 1), p4); }, {x4}));
    std::vector<std::uint8_t> mask(c, 1);
    mask[0] = c > 1 ? 0 : 1;
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::softmax(t, x4, 1, mask), p4); }, {x4}));
    auto pos = random_tensor({b, c, h, w}, rng, true, 0.2, 2.0);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::log(t, pos), p4); }, {pos}));
    track(check_gradients(
        [&](Tape<double>& t) {
          std::mt19937_64 drng(seed + 100);
          return project(t, ops::dropout(t, x4, 0.3, true, drng), p4);
        },
        {x4}));
    auto y4 = random_tensor({b, c, h, w}, rng);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::add(t, x4, y4), p4); }, {x4, y4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::sub(t, x4, y4), p4); }, {x4, y4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::mul(t, x4, y4), p4); }, {x4, y4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::scale(t, x4, 1.7), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::add_scalar(t, x4, 0.3), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::square(t, x4), p4); }, {x4}));
    track(check_gradients([&](Tape<double>& t) { return ops::mean(t, ops::square(t, x4)); }, {x4}));
    auto ps = random_tensor({b, c, h}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::sum_last(t, x4), ps); }, {x4}));
    std::vector<std::size_t> idx(b);
    for (auto& i : idx) i = std::uniform_int_distribution<std::size_t>(0, o - 1)(rng);
    auto pg = random_tensor({b}, rng, false);
    track(check_gradients(
        [&](Tape<double>& t) { return project(t, ops::gather_last(t, ops::dense(t, x2, wd, bd), idx), pg); },
        {x2, wd}));
    std::vector<std::size_t> rows = {b - 1, 0, b - 1};
    auto pr = random_tensor({3, c, h, w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::select_rows(t, x4, rows), pr); }, {x4}));
    auto z4 = random_tensor({b, 1, h, w}, rng);
    auto pz = random_tensor({b, c + 1, h, w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::concat_channels(t, x4, z4), pz); }, {x4, z4}));
    auto pcr = random_tensor({2 * b, c, h, w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::concat_rows(t, {x4, y4}), pcr); }, {x4, y4}));
    auto pre = random_tensor({b, c * h * w}, rng, false);
    track(check_gradients([&](Tape<double>& t) { return project(t, ops::reshape(t, x4, {b, c * h * w}), pre); }, {x4}));
  }
  return {worst < 1e-4, std::to_string(checks) + " checks over " + std::to_string(seeds) +
                            " seeds, worst rel err " + fmt(worst) + " (need < 1e-4)"};
}

Verdict utility_exactness() {
  agent::AgentConfig cfg;
  cfg.tile_channels = 2;
  cfg.height = 2;
  cfg.width = 2;
  cfg.conv_channels = {2};
  cfg.encoding = 8;
  Rng rng(2);
  agent::AgentModel<double> model(cfg, rng);
  Tensor<double> pw, pb, qw, qb;
  for (auto& [name, t] : model.named_parameters()) {
    if (name == "pi.w") pw = t;
    if (name == "pi.b") pb = t;
    if (name == "q.w") qw = t;
    if (name == "q.b") qb = t;
  }
  std::normal_distribution<double> normal(0.0, 2.0);
  double worst = 0.0;
  Tape<double> tape(false);
  const std::size_t D = cfg.encoding, A = cfg.actions, rows = 4;
  for (int head = 0; head < 1000; ++head) {
    for (auto* t : {&pw, &pb, &qw, &qb})
      for (auto& v : t->values()) v = normal(rng);
    auto h = random_tensor({rows, D}, rng, false, -2, 2);
    auto u = model.state_utility(tape, h);
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> logits(A), q(A);
      for (std::size_t a = 0; a < A; ++a) {
        logits[a] = pb[a];
        q[a] = qb[a];
        for (std::size_t d = 0; d < D; ++d) {
          logits[a] += h[r * D + d] * pw[d * A + a];
          q[a] += h[r * D + d] * qw[d * A + a];
        }
      }
      const double top = *std::max_element(logits.begin(), logits.end());
      double z = 0.0, dot = 0.0;
      for (double l : logits) z += std::exp(l - top);
      for (std::size_t a = 0; a < A; ++a) dot += std::exp(logits[a] - top) / z * q[a];
      worst = std::max(worst, std::abs(u[r] - dot));
    }
  }
  return {worst <= 1e-6, "1000 random heads, worst |U - pi.Q| " + fmt(worst) + " (need <= 1e-6)"};
}

Verdict reward_contract() {
  using namespace gpn::dungeon;
  auto env_of = [](const std::string& text, EnvConfig cfg) {
    return Environment(compile_level(parse_level_text(text)), cfg);
  };
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const std::string& name) {
    if (!ok) failed.push_back(name);
  };
  EnvConfig still;
  still.monster_move_prob = 0.0;
  {
    auto env = env_of("A+g", still);
    auto s = env.reset(0);
    auto a = env.step(s, Action::right);
    auto b = env.step(s, Action::right);
    expect(a.reward == 0.0 && !a.terminal && b.reward == 1.0 && b.terminal && b.cause == EndCause::win, "win");
  }
  {
    auto env = env_of("wwwww\nwAe+w\nwwwgw\n", still);
    auto s = env.reset(0);
    auto out = env.step(s, Action::right);
    expect(out.reward == -1.0 && out.terminal && out.cause == EndCause::monster, "monster death");
  }
  {
    EnvConfig cfg = still;
    cfg.step_limit = 4;
    auto env = env_of("A.+.g", cfg);
    auto s = env.reset(0);
    double total = 0.0;
    StepOutcome out;
    for (int i = 0; i < 4; ++i) {
      out = env.step(s, Action::left);
      total += out.reward;
    }
    expect(total == -1.0 && out.terminal && out.cause == EndCause::timeout && s.t == 4, "timeout");
  }
  for (const char* text : {"....", "A.A+g", "A..g", "A+.."}) {
    auto env = env_of(text, still);
    auto s = env.reset(0);
    auto out = env.step(s, Action::right);
    expect(!env.valid() && out.reward == -1.0 && out.terminal && out.cause == EndCause::invalid && s.t == 1,
           std::string("invalid level ") + text);
  }
  {
    EnvConfig cfg = still;
    cfg.reward = RewardMode::shaped;
    auto env = env_of("wwwwwww\nwA+..ew\nw+wwwgw\n", cfg);
    auto s = env.reset(0);
    auto out = env.step(s, Action::right);
    expect(s.score_events == 3 && out.reward == 1.0 / 3.0 && s.has_key, "shaped key pickup");
  }
  std::string detail = "win, monster death, timeout, 4 invalid levels, shaped key pickup";
  for (const auto& f : failed) detail += "; FAILED " + f;
  return {failed.empty(), detail};
}

Verdict value_propagation() {
  using namespace gpn::dungeon;
  const auto level = load_level_file(kFixtures + "/corridor5.lvl");
  std::vector<Environment> envs;
  envs.emplace_back(compile_level(level), EnvConfig{});
  agent::AgentConfig cfg;
  cfg.height = 1;
  cfg.width = 5;
  auto choose = [](Rng&) { return trainer::Selection{false, 0}; };
  int passed = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    agent::AgentModel<float> model(cfg, rng);
    agent::ActorCriticLearner<float> learner(model, {});
    trainer::RolloutDriver driver(model, learner, 1, 5, seed);
    std::vector<trainer::EpisodeRecord> episodes;
    std::uint64_t steps = 0, reached = 0;
    double win = 0.0, gap = 0.0;
    while (steps < 50000) {
      auto stats = driver.run(1000, envs, {}, choose);
      steps += stats.frames;
      episodes.insert(episodes.end(), stats.episodes.begin(), stats.episodes.end());
      if (episodes.size() < 500) continue;
      double wins = 0.0, reward = 0.0, utility = 0.0;
      for (auto it = episodes.end() - 500; it != episodes.end(); ++it) {
        wins += it->win;
        reward += it->reward;
        utility += it->start_utility;
      }
      win = wins / 500.0;
      gap = std::abs(utility - reward) / 500.0;
      if (!reached && win >= 0.9) reached = steps;
    }
    const bool ok = reached > 0 && gap <= 0.15;
    passed += ok;
    detail += " seed" + std::to_string(seed) + (ok ? " ok" : " no") + "(win >= 0.9 at " + std::to_string(reached) +
              " steps, final win " + fmt(win) + ", gap " + fmt(gap) + ")";
  }
  return {passed >= 4, std::to_string(passed) + "/5 seeds (need >= 4):" + detail};
}

template <typename T>
Tensor<T> wall_utility(Tape<T>& tape, const Tensor<T>& obs) {
  const std::size_t m = obs.dim(0), c = obs.dim(1), plane = obs.dim(2) * obs.dim(3);
  auto flat = ops::reshape(tape, obs, {m * c, plane});
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m; ++i) rows.push_back(i * c + static_cast<std::size_t>(dungeon::Tile::wall));
  auto walls = ops::select_rows(tape, flat, rows);
  auto mean_wall = ops::scale(tape, ops::sum_last(tape, walls), T(1) / static_cast<T>(plane));
  return ops::add_scalar(tape, ops::scale(tape, mean_wall, T(-2)), T(1));
}

TrainConfig desk_config() { return load_config_file(kConfigs + "/desk.cfg"); }

Verdict generator_targeting() {
  const auto desk = desk_config();
  Rng rng(5);
  generator::GeneratorModel<float> gen(desk.generator_config(), rng);
  Adam<float> opt(gen.parameters(), AdamConfig{desk.generator_lr});
  generator::UtilityFn<float> u = wall_utility<float>;
  const double initial = generator::generator_update(gen, opt, u, desk.batch_size, rng).mean_abs_utility;
  double last = initial;
  for (int i = 1; i < 500; ++i) last = generator::generator_update(gen, opt, u, desk.batch_size, rng).mean_abs_utility;
  return {last <= 0.1, "mean|U| " + fmt(initial) + " -> " + fmt(last) + " after 500 updates (need <= 0.1)"};
}

Verdict diversity() {
  const auto desk = desk_config();
  int grew = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    agent::AgentModel<float> model(desk.agent_config(), rng);
    generator::GeneratorModel<float> gen(desk.generator_config(), rng);
    Adam<float> opt(gen.parameters(), AdamConfig{desk.generator_lr});
    FreezeGuard<float> freeze(model.parameters());
    generator::EncodeFn<float> encode = [&](Tape<float>& t, const Tensor<float>& obs) { return model.encode(t, obs); };
    const std::size_t m = desk.batch_size;
    auto z = generator::sample_latents<float>(m, desk.latent, rng);
    auto pairs = generator::random_pairing(m, rng);
    auto measure = [&] {
      Tape<float> tape(false);
      auto levels = gen.generate(tape, z, false, rng);
      return static_cast<double>(
          generator::paired_distance(tape, encode(tape, generator::as_observation(tape, levels)), pairs).item());
    };
    const double initial = measure();
    for (int i = 0; i < 50; ++i) generator::diversity_update(gen, opt, encode, m, rng);
    const double final_d = measure();
    grew += final_d >= 1.5 * initial;
    detail += " " + fmt(final_d / initial) + "x";
  }
  return {grew >= 4, std::to_string(grew) + "/5 seeds reach 1.5x (need >= 4), growth:" + detail};
}

std::vector<std::size_t> elite_oracle(const std::vector<trainer::EnvPoolEntry>& pool, double fraction) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].episodes > 0) idx.push_back(i);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const auto& a = pool[idx[i]];
      const auto& b = pool[idx[j]];
      const double da = std::abs(a.average()), db = std::abs(b.average());
      const bool b_first = db < da || (db == da && (b.episodes > a.episodes ||
                                                    (b.episodes == a.episodes && idx[j] < idx[i])));
      if (b_first) std::swap(idx[i], idx[j]);
    }
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pool.size()) - 1e-9));
  idx.resize(std::min(idx.size(), keep));
  return idx;
}

Verdict elitism() {
  std::mt19937_64 rng(29);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 24;
    std::vector<trainer::EnvPoolEntry> pool;
    for (std::size_t i = 0; i < n; ++i) {
      trainer::EnvPoolEntry e;
      e.level = dungeon::LevelMap(1, 4);
      for (int col = 0; col < 4; ++col)
        e.level.set(0, col, static_cast<dungeon::Tile>(rng() % dungeon::kTileKinds));
      e.episodes = rng() % 4;
      e.total_reward = static_cast<double>(static_cast<int>(rng() % 9) - 4) / 4.0 * static_cast<double>(e.episodes);
      pool.push_back(e);
    }
    const double fraction = static_cast<double>(rng() % 101) / 100.0;
    const auto expected = elite_oracle(pool, fraction);
    const auto got = trainer::rank_and_keep_elites(pool, fraction);
    bool same = got.size() == expected.size();
    for (std::size_t i = 0; same && i < got.size(); ++i)
      same = got[i].level == pool[expected[i]].level && got[i].episodes == pool[expected[i]].episodes &&
             got[i].total_reward == pool[expected[i]].total_reward;
    mismatches += !same;
  }
  return {mismatches == 0, "1000 random pools, " + std::to_string(mismatches) + " mismatches with brute-force sort"};
}

Verdict reconstruction() {
  Rng rng(7);
  std::vector<Tensor<float>> observations;
  std::vector<dungeon::LevelMap> levels;
  for (const auto& path : dungeon::list_level_files(kFixtures + "/curated")) {
    auto level = dungeon::load_level_file(path);
    dungeon::Environment env(dungeon::compile_level(level), dungeon::EnvConfig{});
    observations.push_back(env.observe(env.reset(0)));
    levels.push_back(level);
  }
  if (levels.size() != 5) return {false, "expected 5 curated fixtures, found " + std::to_string(levels.size())};
  auto batch = agent::stack_observations<float>(observations);
  agent::AgentConfig acfg;
  acfg.conv_channels = {8};
  acfg.encoding = 32;
  agent::AgentModel<float> model(acfg, rng);
  generator::GeneratorConfig gcfg;
  gcfg.latent = 16;
  gcfg.filters = 16;
  gcfg.bridge_input = 32;
  generator::GeneratorModel<float> gen(gcfg, rng);
  auto params = gen.parameters();
  for (const auto& p : model.encoder_parameters()) params.push_back(p);
  Adam<float> opt(params, AdamConfig{1e-3});
  generator::EncodeFn<float> encode = [&](Tape<float>& t, const Tensor<float>& obs) { return model.encode(t, obs); };
  double loss = 0.0;
  for (int i = 0; i < 2000; ++i) loss = generator::reconstruction_update(gen, opt, encode, batch, rng);
  Tape<float> eval(false);
  auto probs = gen.decode(eval, model.encode(eval, batch), false, rng);
  std::size_t correct = 0, total = 0;
  for (std::size_t n = 0; n < levels.size(); ++n) {
    auto out = generator::discretize_level(probs, n);
    for (std::size_t i = 0; i < out.cells().size(); ++i) correct += out.cells()[i] == levels[n].cells()[i];
    total += out.cells().size();
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  return {acc >= 0.95, "accuracy " + fmt(acc) + " after 2000 updates, final loss " + fmt(loss) + " (need >= 0.95)"};
}

Verdict desk_trend() {
  int passed = 0, failed = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5 && passed < 3 && failed < 3; ++seed) {
    auto cfg = desk_config();
    cfg.seed = seed;
    trainer::Trainer t(cfg);
    std::vector<trainer::MetricsRow> rows;
    while (t.budget_left()) rows.push_back(t.run_iteration());
    const std::size_t third = std::max<std::size_t>(1, rows.size() / 3);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < third; ++i) {
      early += rows[i].mean_real_reward / static_cast<double>(third);
      late += rows[rows.size() - 1 - i].mean_real_reward / static_cast<double>(third);
    }
    const bool a = rows.back().failure_rate < rows.front().failure_rate;
    const bool b = std::abs(late) < std::abs(early);
    (a && b ? passed : failed) += 1;
    detail += " seed" + std::to_string(seed) + (a && b ? " ok" : " no") + "(fail " + fmt(rows.front().failure_rate) +
              "->" + fmt(rows.back().failure_rate) + ", |reward| " + fmt(std::abs(early)) + "->" +
              fmt(std::abs(late)) + ")";
  }
  return {passed >= 3, std::to_string(passed) + " seeds pass, " + std::to_string(failed) +
                           " fail (need >= 3 of 5):" + detail};
}

Verdict determinism() {
  auto cfg = desk_config();
  cfg.workers = 1;
  std::string first_a, first_b;
  {
    trainer::Trainer a(cfg), b(cfg);
    first_a = trainer::metrics_csv(a.run_iteration(), false);
    first_b = trainer::metrics_csv(b.run_iteration(), false);
  }
  const bool same = first_a == first_b;

  const auto path = std::filesystem::temp_directory_path() / ("gpn_acceptance_" + std::to_string(::getpid()) + ".gpnf");
  trainer::Trainer straight(cfg);
  straight.run_iteration();
  const auto expected = trainer::metrics_csv(straight.run_iteration(), false);
  {
    trainer::Trainer interrupted(cfg);
    interrupted.run_iteration();
    interrupted.to_archive().save(path);
  }
  const auto archive = checkpoint::Archive::load(path);
  std::filesystem::remove(path);
  trainer::Trainer resumed(trainer::Trainer::config_from_archive(archive));
  resumed.restore(archive);
  const bool resume_same = trainer::metrics_csv(resumed.run_iteration(), false) == expected;
  return {same && resume_same, std::string("same-seed first iteration ") + (same ? "identical" : "DIFFERS") +
                                   ", resumed second iteration " + (resume_same ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"autodiff finite differences", autodiff_oracle},
      {"utility is the policy-weighted Q", utility_exactness},
      {"reward contract", reward_contract},
      {"undiscounted value propagation on corridor", value_propagation},
      {"generator targets zero utility", generator_targeting},
      {"diversity updates spread encodings", diversity},
      {"elitism matches brute force", elitism},
      {"reconstruction of curated levels", reconstruction},
      {"desk run trend", desk_trend},
      {"determinism and resume", determinism},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const std::size_t number = i + 1;
    if (!only.empty() && !only.count(number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !v.pass;
    std::cout << "criterion " << number << " " << (v.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
              << v.detail << " (" << fmt(secs) << " s)" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
