#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gpn/agent.hpp"
#include "gpn/dungeon.hpp"
#include "gpn/generator.hpp"

namespace gpn {

enum class TrainMode { unsupervised, semi };

std::string_view mode_name(TrainMode mode);

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::string key)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Everything a training run needs. There is deliberately no discount factor:
// utilities are undiscounted expected episode rewards.
struct TrainConfig {
  TrainMode mode = TrainMode::unsupervised;
  std::uint64_t seed = 1;
  std::size_t workers = 16;
  std::uint64_t frames = 200000;  // budget over all environment frames, 0 = none
  std::size_t iterations = 0;     // outer iterations, 0 = until the frame budget

  double policy_lr = 2.5e-4;          // alpha^pi
  double utility_lr = 2.5e-5;         // alpha^Q
  double reconstruction_lr = 5e-5;    // alpha^R
  double generator_lr = 1e-4;         // generator and diversity updates
  double entropy_coef = 0.01;

  std::size_t batch_size = 128;  // m
  std::uint64_t steps_per_iteration = 20000;
  std::size_t generator_updates = 10;
  std::size_t diversity_updates = 90;
  std::uint64_t pretrain_steps = 50000;
  double elite_fraction = 0.30;
  double human_sample_rate = 0.5;
  std::size_t update_interval = 5;  // n

  int step_limit = 500;  // T
  dungeon::RewardMode reward = dungeon::RewardMode::pure;
  double monster_move_prob = 0.5;

  std::vector<std::size_t> agent_conv = {16, 16};
  std::size_t agent_residual_blocks = 0;
  std::size_t encoding = 64;
  bool recurrent = false;

  std::size_t latent = 64;
  std::size_t filters = 64;
  double dropout = 0.1;
  ops::UpsampleMode upsample = ops::UpsampleMode::subpixel;
  std::string mask = "111111";  // one flag per tile, in channel order

  std::string curated;  // directory of curated .lvl files
  std::size_t samples_per_iteration = 9;

  agent::AgentConfig agent_config() const;
  generator::GeneratorConfig generator_config() const;
  agent::LearnerConfig learner_config() const;
  dungeon::EnvConfig env_config() const;

  // Throws ConfigError naming the offending key.
  void validate() const;
};

// Sets one key from its text value; unknown keys and bad values throw.
void apply_setting(TrainConfig& config, std::string_view key, std::string_view value);

// Flat "key = value" lines; '#' starts a comment.
TrainConfig parse_config_text(std::string_view text, TrainConfig base = {});
TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base = {});
std::string config_to_text(const TrainConfig& config);

std::vector<std::string> config_keys();

}  // namespace gpn
