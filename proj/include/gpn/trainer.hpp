#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gpn/agent.hpp"
#include "gpn/checkpoint.hpp"
#include "gpn/config.hpp"
#include "gpn/dungeon.hpp"
#include "gpn/generator.hpp"

namespace gpn::trainer {

struct EnvPoolEntry {
  dungeon::LevelMap level;
  bool valid = false;
  std::uint64_t episodes = 0;
  double total_reward = 0.0;
  dungeon::Origin origin = dungeon::Origin::generated;

  double average() const { return episodes ? total_reward / static_cast<double>(episodes) : 0.0; }
};

EnvPoolEntry make_entry(dungeon::LevelMap level, dungeon::Origin origin);

// ceil(fraction * pool_size).
std::size_t elite_count(std::size_t pool_size, double fraction);

// m discretized generator samples (eval mode); the trailing slots are taken
// by the elites, which start over with no episodes. Invalid levels stay in.
std::vector<EnvPoolEntry> build_env_pool(const generator::GeneratorModel<float>& gen,
                                         const std::vector<EnvPoolEntry>& elites, std::size_t m,
                                         Rng& rng);

enum class Phase { pretraining, main };

struct Selection {
  bool curated = false;
  std::size_t index = 0;
};

Selection select_environment(std::size_t pool_size, std::size_t curated_count, Rng& rng, Phase phase,
                             TrainMode mode, double human_sample_rate);

// Played entries sorted by |average reward| ascending, then more episodes,
// then pool order; keeps ceil(fraction * pool size) of them.
std::vector<EnvPoolEntry> rank_and_keep_elites(const std::vector<EnvPoolEntry>& pool, double fraction);

struct EpisodeRecord {
  Selection source;
  double reward = 0.0;
  int length = 0;
  bool win = false;
  double start_utility = 0.0;  // U(s0) when the episode began
};

struct PhaseStats {
  std::uint64_t frames = 0;
  std::size_t updates = 0;
  double value_loss = 0.0;   // sums over updates
  double policy_loss = 0.0;
  double entropy = 0.0;
  std::vector<EpisodeRecord> episodes;
};

// Round-based worker pool: every worker extends its own episode by up to n
// steps against the same parameters, then the learner applies the segments
// in worker order. Results do not depend on how many threads run the workers.
class RolloutDriver {
 public:
  using Chooser = std::function<Selection(Rng&)>;
  using SegmentHook = std::function<void(const agent::Segment&)>;

  RolloutDriver(agent::AgentModel<float>& model, agent::ActorCriticLearner<float>& learner,
                std::size_t workers, std::size_t interval, std::uint64_t seed);

  // Runs exactly `frames` environment steps. Unfinished episodes are
  // abandoned when the call returns.
  PhaseStats run(std::uint64_t frames, const std::vector<dungeon::Environment>& pool,
                 const std::vector<dungeon::Environment>& curated, const Chooser& choose,
                 const SegmentHook& after_segment = {});

 private:
  struct Worker;
  struct Collected;

  Collected collect(Worker& w, std::size_t limit, const std::vector<dungeon::Environment>& pool,
                    const std::vector<dungeon::Environment>& curated, const Chooser& choose) const;

  agent::AgentModel<float>* model_;
  agent::ActorCriticLearner<float>* learner_;
  std::size_t workers_;
  std::size_t interval_;
  std::uint64_t seed_;
};

struct MetricsRow {
  std::size_t iteration = 0;
  std::uint64_t frames = 0;
  double mean_real_reward = 0.0;
  double mean_estimated_utility = 0.0;
  double utility_gap = 0.0;
  double failure_rate = 0.0;
  double diversity = 0.0;
  double value_loss = 0.0;
  double policy_loss = 0.0;
  double generator_loss = 0.0;
  double reconstruction_loss = 0.0;  // NaN when no reconstruction ran
  std::uint64_t episodes = 0;
  double win_rate = 0.0;
  std::size_t played_levels = 0;
  std::size_t elites = 0;
  double wall_clock = 0.0;  // seconds spent in the iteration
};

std::string metrics_header();
std::string metrics_csv(const MetricsRow& row, bool with_wall_clock = true);

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return config_; }
  TrainConfig& mutable_config() { return config_; }
  agent::AgentModel<float>& agent() { return agent_; }
  generator::GeneratorModel<float>& generator() { return gen_; }
  const std::vector<EnvPoolEntry>& elites() const { return elites_; }
  const std::vector<EnvPoolEntry>& pool() const { return pool_; }
  const std::vector<dungeon::LevelMap>& curated() const { return curated_; }
  std::size_t iteration() const { return iteration_; }
  std::uint64_t frames() const { return frames_; }
  bool pretrained() const { return pretrained_; }

  // Agent loop on curated levels only, with reconstruction updates. No-op
  // in unsupervised mode or for zero steps.
  PhaseStats pretrain(std::uint64_t steps);
  MetricsRow run_iteration();

  bool budget_left() const;

  checkpoint::Archive to_archive() const;
  void restore(const checkpoint::Archive& archive);
  static TrainConfig config_from_archive(const checkpoint::Archive& archive);

  // Pretrains if due, then iterates until the budget runs out or `stop`
  // returns true, appending to <out>/metrics.csv, sampling levels into
  // <out>/levels/ and checkpointing to <out>/checkpoint.gpnf.
  void run(const std::filesystem::path& out, const std::function<bool()>& stop, std::ostream* log);

 private:
  std::vector<dungeon::Environment> environments(const std::vector<EnvPoolEntry>& entries) const;
  // One reconstruction update per environment step of the segment.
  double reconstruction_step(const agent::Segment& seg, Rng& rng);

  TrainConfig config_;
  Rng rng_;
  agent::AgentModel<float> agent_;
  generator::GeneratorModel<float> gen_;
  agent::ActorCriticLearner<float> learner_;
  Adam<float> gen_opt_;
  Adam<float> div_opt_;
  Adam<float> rec_opt_;
  std::vector<dungeon::LevelMap> curated_;
  std::vector<dungeon::Environment> curated_envs_;
  std::vector<EnvPoolEntry> elites_;
  std::vector<EnvPoolEntry> pool_;
  std::size_t iteration_ = 0;
  std::uint64_t frames_ = 0;
  bool pretrained_ = false;
  double rec_sum_ = 0.0;
  std::size_t rec_count_ = 0;
};

}  // namespace gpn::trainer
