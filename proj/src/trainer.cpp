#include "gpn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace gpn::trainer {

using dungeon::Environment;
using dungeon::LevelMap;
using dungeon::Origin;

EnvPoolEntry make_entry(LevelMap level, Origin origin) {
  EnvPoolEntry e;
  e.valid = dungeon::compile_level(level).valid;
  level.set_origin(origin);
  e.level = std::move(level);
  e.origin = origin;
  return e;
}

std::size_t elite_count(std::size_t pool_size, double fraction) {
  if (fraction <= 0.0) return 0;
  const double raw = fraction * static_cast<double>(pool_size);
  return std::min(pool_size, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

std::vector<EnvPoolEntry> build_env_pool(const generator::GeneratorModel<float>& gen,
                                         const std::vector<EnvPoolEntry>& elites, std::size_t m,
                                         Rng& rng) {
  const std::size_t carried = std::min(elites.size(), m);
  const std::size_t fresh = m - carried;
  std::vector<EnvPoolEntry> pool;
  pool.reserve(m);
  if (fresh > 0) {
    Tape<float> tape(false);
    auto z = generator::sample_latents<float>(fresh, gen.config().latent, rng);
    auto probs = gen.generate(tape, z, false, rng);
    for (std::size_t i = 0; i < fresh; ++i) {
      pool.push_back(make_entry(generator::discretize_level(probs, i), Origin::generated));
    }
  }
  for (std::size_t i = 0; i < carried; ++i) pool.push_back(make_entry(elites[i].level, Origin::elite));
  return pool;
}

Selection select_environment(std::size_t pool_size, std::size_t curated_count, Rng& rng, Phase phase,
                             TrainMode mode, double human_sample_rate) {
  auto uniform = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };
  if (phase == Phase::pretraining) {
    if (curated_count == 0) throw std::invalid_argument("pretraining needs curated levels");
    return {true, uniform(curated_count)};
  }
  if (mode == TrainMode::semi && curated_count > 0) {
    if (std::bernoulli_distribution(human_sample_rate)(rng)) return {true, uniform(curated_count)};
  }
  if (pool_size == 0) throw std::invalid_argument("select_environment: empty pool");
  return {false, uniform(pool_size)};
}

std::vector<EnvPoolEntry> rank_and_keep_elites(const std::vector<EnvPoolEntry>& pool, double fraction) {
  std::vector<std::size_t> played;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].episodes > 0) played.push_back(i);
  std::stable_sort(played.begin(), played.end(), [&](std::size_t a, std::size_t b) {
    const double da = std::abs(pool[a].average()), db = std::abs(pool[b].average());
    if (da != db) return da < db;
    return pool[a].episodes > pool[b].episodes;
  });
  const std::size_t keep = std::min(elite_count(pool.size(), fraction), played.size());
  std::vector<EnvPoolEntry> out;
  out.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.push_back(pool[played[i]]);
  return out;
}

struct RolloutDriver::Worker {
  Rng rng;
  bool active = false;
  Selection source;
  const Environment* env = nullptr;
  dungeon::GameState state;
  Tensor<float> obs;
  std::vector<float> hidden;
  double reward = 0.0;
  int length = 0;
  double start_utility = 0.0;
};

struct RolloutDriver::Collected {
  agent::Segment segment;
  std::optional<EpisodeRecord> finished;
};

RolloutDriver::RolloutDriver(agent::AgentModel<float>& model, agent::ActorCriticLearner<float>& learner,
                             std::size_t workers, std::size_t interval, std::uint64_t seed)
    : model_(&model), learner_(&learner), workers_(workers), interval_(interval), seed_(seed) {
  if (workers_ == 0 || interval_ == 0) {
    throw std::invalid_argument("rollout driver needs at least one worker and a positive interval");
  }
}

RolloutDriver::Collected RolloutDriver::collect(Worker& w, std::size_t limit,
                                                const std::vector<Environment>& pool,
                                                const std::vector<Environment>& curated,
                                                const Chooser& choose) const {
  Collected c;
  if (!w.active) {
    w.source = choose(w.rng);
    const auto& envs = w.source.curated ? curated : pool;
    w.env = &envs.at(w.source.index);
    w.state = w.env->reset(w.rng());
    w.obs = w.env->observe(w.state);
    w.hidden.clear();
    w.reward = 0.0;
    w.length = 0;
    w.active = true;
  }
  const bool recurrent = model_->config().recurrent;
  auto& seg = c.segment;
  seg.initial_hidden = w.hidden;
  seg.observations.push_back(w.obs);
  for (std::size_t i = 0; i < limit; ++i) {
    const auto eval = agent::evaluate_observation(*model_, w.obs, w.hidden);
    if (w.length == 0) w.start_utility = eval.utility;
    const auto action = agent::act(eval.dist, w.rng, agent::ActMode::sample);
    auto out = w.env->step(w.state, static_cast<dungeon::Action>(action));
    if (recurrent) w.hidden = eval.hidden;
    w.obs = out.observation;
    w.reward += out.reward;
    ++w.length;
    seg.actions.push_back(action);
    seg.rewards.push_back(out.reward);
    seg.terminals.push_back(out.terminal);
    seg.observations.push_back(w.obs);
    if (out.terminal) {
      c.finished = EpisodeRecord{w.source, w.reward, w.length,
                                 w.state.outcome == dungeon::Outcome::win, w.start_utility};
      w.active = false;
      break;
    }
  }
  return c;
}

namespace {

// Runs fn(i) for i in [0, n); spreads over threads when the machine has them.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t threads = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

PhaseStats RolloutDriver::run(std::uint64_t frames, const std::vector<Environment>& pool,
                              const std::vector<Environment>& curated, const Chooser& choose,
                              const SegmentHook& after_segment) {
  std::vector<Worker> workers(workers_);
  Rng seeder(seed_);
  for (auto& w : workers) w.rng.seed(seeder());

  PhaseStats stats;
  std::vector<std::size_t> limits(workers_);
  std::vector<Collected> results(workers_);
  while (stats.frames < frames) {
    std::uint64_t left = frames - stats.frames;
    for (auto& l : limits) {
      l = static_cast<std::size_t>(std::min<std::uint64_t>(interval_, left));
      left -= l;
    }
    parallel_for(workers_, [&](std::size_t i) {
      if (limits[i] > 0) results[i] = collect(workers[i], limits[i], pool, curated, choose);
    });
    for (std::size_t i = 0; i < workers_; ++i) {
      if (limits[i] == 0) continue;
      const auto& seg = results[i].segment;
      stats.frames += seg.actions.size();
      const auto u = learner_->update(seg);
      ++stats.updates;
      stats.value_loss += u.value_loss;
      stats.policy_loss += u.policy_loss;
      stats.entropy += u.entropy;
      if (after_segment) after_segment(seg);
      if (results[i].finished) stats.episodes.push_back(*results[i].finished);
    }
  }
  return stats;
}

std::string metrics_header() {
  return "iteration,frames,mean_real_reward,mean_estimated_utility,utility_gap,failure_rate,diversity,"
         "value_loss,policy_loss,generator_loss,reconstruction_loss,episodes,win_rate,played_levels,"
         "elites,wall_clock_s";
}

std::string metrics_csv(const MetricsRow& r, bool with_wall_clock) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << r.iteration << ',' << r.frames << ',' << r.mean_real_reward << ',' << r.mean_estimated_utility << ','
     << r.utility_gap << ',' << r.failure_rate << ',' << r.diversity << ',' << r.value_loss << ','
     << r.policy_loss << ',' << r.generator_loss << ',' << r.reconstruction_loss << ',' << r.episodes << ','
     << r.win_rate << ',' << r.played_levels << ',' << r.elites << ',';
  if (with_wall_clock) os << std::setprecision(4) << r.wall_clock;
  return os.str();
}

namespace {

std::vector<Tensor<float>> reconstruction_params(const agent::AgentModel<float>& a,
                                                 const generator::GeneratorModel<float>& g) {
  auto params = g.parameters();
  for (const auto& p : a.encoder_parameters()) params.push_back(p);
  return params;
}

const TrainConfig& checked(const TrainConfig& config) {
  config.validate();
  return config;
}

}  // namespace

Trainer::Trainer(TrainConfig config)
    : config_(checked(config)),
      rng_(config_.seed),
      agent_(config_.agent_config(), rng_),
      gen_(config_.generator_config(), rng_),
      learner_(agent_, config_.learner_config()),
      gen_opt_(gen_.parameters(), AdamConfig{config_.generator_lr}),
      div_opt_(gen_.parameters(), AdamConfig{config_.generator_lr}),
      rec_opt_(reconstruction_params(agent_, gen_), AdamConfig{config_.reconstruction_lr}) {
  if (!config_.curated.empty()) {
    for (const auto& path : dungeon::list_level_files(config_.curated)) {
      auto level = dungeon::load_level_file(path, Origin::curated);
      if (static_cast<std::size_t>(level.height()) != agent_.config().height ||
          static_cast<std::size_t>(level.width()) != agent_.config().width) {
        throw std::invalid_argument("curated level " + path.string() + " is " +
                                    std::to_string(level.height()) + "x" + std::to_string(level.width()) +
                                    ", expected " + std::to_string(agent_.config().height) + "x" +
                                    std::to_string(agent_.config().width));
      }
      curated_.push_back(std::move(level));
    }
    if (config_.mode == TrainMode::semi && curated_.empty()) {
      throw std::invalid_argument("no .lvl files in curated directory " + config_.curated);
    }
  }
  for (const auto& level : curated_) {
    curated_envs_.emplace_back(dungeon::compile_level(level), config_.env_config());
  }
}

std::vector<Environment> Trainer::environments(const std::vector<EnvPoolEntry>& entries) const {
  std::vector<Environment> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.emplace_back(dungeon::compile_level(e.level), config_.env_config());
  return out;
}

double Trainer::reconstruction_step(const agent::Segment& seg, Rng& rng) {
  generator::EncodeFn<float> encode = [this](Tape<float>& tape, const Tensor<float>& obs) {
    return agent_.encode(tape, obs);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < seg.actions.size(); ++i) {
    std::span<const Tensor<float>> state(&seg.observations[i], 1);
    const double loss =
        generator::reconstruction_update(gen_, rec_opt_, encode, agent::stack_observations<float>(state), rng);
    total += loss;
    rec_sum_ += loss;
    ++rec_count_;
  }
  return total;
}

PhaseStats Trainer::pretrain(std::uint64_t steps) {
  if (config_.mode == TrainMode::unsupervised || steps == 0) return {};
  Rng phase_rng(rng_());
  RolloutDriver driver(agent_, learner_, config_.workers, config_.update_interval, phase_rng());
  Rng rec_rng(phase_rng());
  const std::size_t n_curated = curated_.size();
  auto choose = [&](Rng& r) {
    return select_environment(0, n_curated, r, Phase::pretraining, config_.mode, config_.human_sample_rate);
  };
  auto hook = [&](const agent::Segment& seg) { reconstruction_step(seg, rec_rng); };
  auto stats = driver.run(steps, {}, curated_envs_, choose, hook);
  frames_ += stats.frames;
  pretrained_ = true;
  return stats;
}

bool Trainer::budget_left() const {
  if (config_.iterations != 0 && iteration_ >= config_.iterations) return false;
  return config_.frames == 0 || frames_ < config_.frames;
}

MetricsRow Trainer::run_iteration() {
  const auto start = std::chrono::steady_clock::now();
  Rng it_rng(rng_());
  ++iteration_;
  const std::size_t m = config_.batch_size;
  pool_ = build_env_pool(gen_, elites_, m, it_rng);
  const auto envs = environments(pool_);

  std::uint64_t steps = config_.steps_per_iteration;
  if (config_.frames != 0) steps = std::min(steps, config_.frames - std::min(frames_, config_.frames));
  RolloutDriver driver(agent_, learner_, config_.workers, config_.update_interval, it_rng());
  Rng rec_rng(it_rng());
  rec_sum_ = 0.0;
  rec_count_ = 0;
  const std::size_t n_pool = pool_.size(), n_curated = curated_.size();
  auto choose = [&](Rng& r) {
    return select_environment(n_pool, n_curated, r, Phase::main, config_.mode, config_.human_sample_rate);
  };
  RolloutDriver::SegmentHook hook;
  if (config_.mode == TrainMode::semi) {
    hook = [&](const agent::Segment& seg) { reconstruction_step(seg, rec_rng); };
  }
  const auto stats = driver.run(steps, envs, curated_envs_, choose, hook);
  frames_ += stats.frames;

  std::uint64_t pool_episodes = 0, wins = 0;
  for (const auto& ep : stats.episodes) {
    if (ep.source.curated) continue;
    auto& entry = pool_[ep.source.index];
    ++entry.episodes;
    entry.total_reward += ep.reward;
    ++pool_episodes;
    wins += ep.win ? 1 : 0;
  }

  Rng gen_rng(it_rng());
  double gen_loss = 0.0, diversity = 0.0;
  {
    FreezeGuard<float> frozen(agent_.parameters());
    generator::UtilityFn<float> utility = [this](Tape<float>& tape, const Tensor<float>& obs) {
      return agent_.state_utility(tape, agent_.encode(tape, obs));
    };
    for (std::size_t i = 0; i < config_.generator_updates; ++i) {
      gen_loss += generator::generator_update(gen_, gen_opt_, utility, m, gen_rng).loss;
    }
    generator::EncodeFn<float> encode = [this](Tape<float>& tape, const Tensor<float>& obs) {
      return agent_.encode(tape, obs);
    };
    for (std::size_t i = 0; i < config_.diversity_updates; ++i) {
      diversity += generator::diversity_update(gen_, div_opt_, encode, m, gen_rng);
    }
  }
  elites_ = rank_and_keep_elites(pool_, config_.elite_fraction);

  MetricsRow row;
  row.iteration = iteration_;
  row.frames = frames_;
  double utility_all = 0.0, utility_played = 0.0, reward_played = 0.0;
  std::size_t generated = 0, failed = 0;
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    const auto& entry = pool_[i];
    const double u = agent::evaluate_observation(agent_, envs[i].observe(envs[i].reset(0))).utility;
    utility_all += u;
    if (entry.episodes > 0) {
      ++row.played_levels;
      utility_played += u;
      reward_played += entry.average();
    }
    if (entry.origin == Origin::generated) {
      ++generated;
      failed += entry.valid ? 0 : 1;
    }
  }
  if (generated == 0) {
    for (const auto& entry : pool_) failed += entry.valid ? 0 : 1;
    generated = pool_.size();
  }
  row.mean_estimated_utility = utility_all / static_cast<double>(pool_.size());
  if (row.played_levels > 0) {
    const double n = static_cast<double>(row.played_levels);
    row.mean_real_reward = reward_played / n;
    row.utility_gap = std::abs(utility_played / n - row.mean_real_reward);
  }
  row.failure_rate = static_cast<double>(failed) / static_cast<double>(generated);
  row.diversity = config_.diversity_updates ? diversity / static_cast<double>(config_.diversity_updates) : 0.0;
  if (stats.updates > 0) {
    row.value_loss = stats.value_loss / static_cast<double>(stats.updates);
    row.policy_loss = stats.policy_loss / static_cast<double>(stats.updates);
  }
  row.generator_loss = config_.generator_updates ? gen_loss / static_cast<double>(config_.generator_updates) : 0.0;
  row.reconstruction_loss =
      rec_count_ ? rec_sum_ / static_cast<double>(rec_count_) : std::numeric_limits<double>::quiet_NaN();
  row.episodes = pool_episodes;
  row.win_rate = pool_episodes ? static_cast<double>(wins) / static_cast<double>(pool_episodes) : 0.0;
  row.elites = elites_.size();
  row.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return row;
}

checkpoint::Archive Trainer::to_archive() const {
  checkpoint::Archive a;
  a.put_text("config", config_to_text(config_));
  nlohmann::json state;
  state["iteration"] = iteration_;
  state["frames"] = frames_;
  state["pretrained"] = pretrained_;
  std::ostringstream rng_text;
  rng_text << rng_;
  state["rng"] = rng_text.str();
  auto elites = nlohmann::json::array();
  for (const auto& e : elites_) {
    elites.push_back({{"level", dungeon::render_level(e.level)},
                      {"episodes", e.episodes},
                      {"total_reward", e.total_reward},
                      {"origin", std::string(dungeon::origin_name(e.origin))}});
  }
  state["elites"] = elites;
  a.put_text("state", state.dump());
  checkpoint::put_params(a, agent_.named_parameters());
  checkpoint::put_params(a, gen_.named_parameters());
  auto& learner = const_cast<agent::ActorCriticLearner<float>&>(learner_);
  checkpoint::put_adam(a, "value", learner.value_optimizer());
  checkpoint::put_adam(a, "policy", learner.policy_optimizer());
  checkpoint::put_adam(a, "generator", gen_opt_);
  checkpoint::put_adam(a, "diversity", div_opt_);
  checkpoint::put_adam(a, "reconstruction", rec_opt_);
  return a;
}

TrainConfig Trainer::config_from_archive(const checkpoint::Archive& archive) {
  try {
    return parse_config_text(archive.text("config"));
  } catch (const ConfigError& e) {
    throw checkpoint::CheckpointError(std::string("checkpoint config is unreadable: ") + e.what());
  }
}

void Trainer::restore(const checkpoint::Archive& a) {
  checkpoint::get_params(a, agent_.named_parameters());
  checkpoint::get_params(a, gen_.named_parameters());
  checkpoint::get_adam(a, "value", learner_.value_optimizer());
  checkpoint::get_adam(a, "policy", learner_.policy_optimizer());
  checkpoint::get_adam(a, "generator", gen_opt_);
  checkpoint::get_adam(a, "diversity", div_opt_);
  checkpoint::get_adam(a, "reconstruction", rec_opt_);
  try {
    const auto state = nlohmann::json::parse(a.text("state"));
    iteration_ = state.at("iteration").get<std::size_t>();
    frames_ = state.at("frames").get<std::uint64_t>();
    pretrained_ = state.at("pretrained").get<bool>();
    std::istringstream rng_text(state.at("rng").get<std::string>());
    rng_text >> rng_;
    if (!rng_text) throw checkpoint::CheckpointError("checkpoint: unreadable generator state");
    elites_.clear();
    for (const auto& e : state.at("elites")) {
      auto entry = make_entry(dungeon::parse_level_text(e.at("level").get<std::string>(), Origin::elite),
                              Origin::elite);
      entry.episodes = e.at("episodes").get<std::uint64_t>();
      entry.total_reward = e.at("total_reward").get<double>();
      elites_.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw checkpoint::CheckpointError(std::string("checkpoint state is unreadable: ") + e.what());
  } catch (const dungeon::ParseError& e) {
    throw checkpoint::CheckpointError(std::string("checkpoint elite level is unreadable: ") + e.what());
  }
  pool_.clear();
}

void Trainer::run(const std::filesystem::path& out, const std::function<bool()>& stop, std::ostream* log) {
  namespace fs = std::filesystem;
  fs::create_directories(out / "levels");
  const auto metrics_path = out / "metrics.csv";
  const bool fresh_metrics = !fs::exists(metrics_path) || fs::file_size(metrics_path) == 0;
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  if (fresh_metrics) metrics << metrics_header() << '\n' << std::flush;

  const auto checkpoint_path = out / "checkpoint.gpnf";
  if (config_.mode == TrainMode::semi && !pretrained_ && config_.pretrain_steps > 0 && budget_left()) {
    std::uint64_t steps = config_.pretrain_steps;
    if (config_.frames != 0) steps = std::min(steps, config_.frames - frames_);
    const auto stats = pretrain(steps);
    if (log) {
      std::size_t wins = 0;
      for (const auto& ep : stats.episodes) wins += ep.win ? 1 : 0;
      *log << "pretraining: " << stats.frames << " frames, " << stats.episodes.size() << " episodes, win rate "
           << (stats.episodes.empty() ? 0.0 : double(wins) / double(stats.episodes.size())) << '\n';
    }
    to_archive().save(checkpoint_path);
  }

  while (budget_left() && !(stop && stop())) {
    const auto row = run_iteration();
    metrics << metrics_csv(row) << '\n' << std::flush;

    std::ostringstream dir_name;
    dir_name << "iter_" << std::setw(4) << std::setfill('0') << row.iteration;
    const auto level_dir = out / "levels" / dir_name.str();
    fs::create_directories(level_dir);
    std::size_t written = 0;
    for (std::size_t i = 0; i < pool_.size() && written < config_.samples_per_iteration; ++i) {
      if (pool_[i].origin != Origin::generated) continue;
      std::ostringstream name;
      name << "sample_" << std::setw(2) << std::setfill('0') << written++ << ".lvl";
      dungeon::save_level_file(pool_[i].level, level_dir / name.str());
    }
    to_archive().save(checkpoint_path);
    if (log) {
      *log << "iteration " << row.iteration << ": frames " << row.frames << ", failure rate "
           << row.failure_rate << ", real reward " << row.mean_real_reward << ", U(s0) "
           << row.mean_estimated_utility << ", win rate " << row.win_rate << ", diversity " << row.diversity
           << ", " << row.wall_clock << " s\n"
           << std::flush;
    }
  }
}

}  // namespace gpn::trainer
