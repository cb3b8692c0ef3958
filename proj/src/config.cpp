#include "gpn/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace gpn {

std::string_view mode_name(TrainMode mode) {
  return mode == TrainMode::semi ? "semi" : "unsupervised";
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("config key '" + std::string(key) + "': cannot read '" + std::string(value) +
                        "' as " + std::string(expected),
                    std::string(key));
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view value) {
  Int out{};
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || end != value.data() + value.size()) bad_value(key, value, "an integer");
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  double out = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc{} || end != value.data() + value.size()) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "true/false");
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view value) {
  std::vector<std::size_t> out;
  if (trim(value).empty()) return out;
  std::size_t start = 0;
  while (start <= value.size()) {
    std::size_t end = value.find(',', start);
    if (end == std::string_view::npos) end = value.size();
    out.push_back(parse_int<std::size_t>(key, trim(value.substr(start, end - start))));
    start = end + 1;
  }
  return out;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define GPN_INT_FIELD(name, type)                                                                \
  Field {                                                                                        \
    #name, [](TrainConfig& c, std::string_view k, std::string_view v) { c.name = parse_int<type>(k, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.name); }                              \
  }
#define GPN_DOUBLE_FIELD(name)                                                                   \
  Field {                                                                                        \
    #name, [](TrainConfig& c, std::string_view k, std::string_view v) { c.name = parse_double(k, v); }, \
        [](const TrainConfig& c) { return fmt_double(c.name); }                                  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"mode",
            [](TrainConfig& c, std::string_view k, std::string_view v) {
              if (v == "unsupervised") c.mode = TrainMode::unsupervised;
              else if (v == "semi") c.mode = TrainMode::semi;
              else bad_value(k, v, "unsupervised or semi");
            },
            [](const TrainConfig& c) { return std::string(mode_name(c.mode)); }},
      GPN_INT_FIELD(seed, std::uint64_t),
      GPN_INT_FIELD(workers, std::size_t),
      GPN_INT_FIELD(frames, std::uint64_t),
      GPN_INT_FIELD(iterations, std::size_t),
      GPN_DOUBLE_FIELD(policy_lr),
      GPN_DOUBLE_FIELD(utility_lr),
      GPN_DOUBLE_FIELD(reconstruction_lr),
      GPN_DOUBLE_FIELD(generator_lr),
      GPN_DOUBLE_FIELD(entropy_coef),
      GPN_INT_FIELD(batch_size, std::size_t),
      GPN_INT_FIELD(steps_per_iteration, std::uint64_t),
      GPN_INT_FIELD(generator_updates, std::size_t),
      GPN_INT_FIELD(diversity_updates, std::size_t),
      GPN_INT_FIELD(pretrain_steps, std::uint64_t),
      GPN_DOUBLE_FIELD(elite_fraction),
      GPN_DOUBLE_FIELD(human_sample_rate),
      GPN_INT_FIELD(update_interval, std::size_t),
      GPN_INT_FIELD(step_limit, int),
      Field{"reward",
            [](TrainConfig& c, std::string_view k, std::string_view v) {
              if (v == "pure") c.reward = dungeon::RewardMode::pure;
              else if (v == "shaped") c.reward = dungeon::RewardMode::shaped;
              else bad_value(k, v, "pure or shaped");
            },
            [](const TrainConfig& c) {
              return std::string(c.reward == dungeon::RewardMode::shaped ? "shaped" : "pure");
            }},
      GPN_DOUBLE_FIELD(monster_move_prob),
      Field{"agent_conv",
            [](TrainConfig& c, std::string_view k, std::string_view v) { c.agent_conv = parse_list(k, v); },
            [](const TrainConfig& c) { return fmt_list(c.agent_conv); }},
      GPN_INT_FIELD(agent_residual_blocks, std::size_t),
      GPN_INT_FIELD(encoding, std::size_t),
      Field{"recurrent",
            [](TrainConfig& c, std::string_view k, std::string_view v) { c.recurrent = parse_bool(k, v); },
            [](const TrainConfig& c) { return std::string(c.recurrent ? "true" : "false"); }},
      GPN_INT_FIELD(latent, std::size_t),
      GPN_INT_FIELD(filters, std::size_t),
      GPN_DOUBLE_FIELD(dropout),
      Field{"upsample",
            [](TrainConfig& c, std::string_view k, std::string_view v) {
              if (v == "nearest") c.upsample = ops::UpsampleMode::nearest;
              else if (v == "subpixel") c.upsample = ops::UpsampleMode::subpixel;
              else bad_value(k, v, "nearest or subpixel");
            },
            [](const TrainConfig& c) {
              return std::string(c.upsample == ops::UpsampleMode::nearest ? "nearest" : "subpixel");
            }},
      Field{"mask",
            [](TrainConfig& c, std::string_view k, std::string_view v) {
              if (v.size() != dungeon::kTileKinds || v.find_first_not_of("01") != std::string_view::npos) {
                bad_value(k, v, "six 0/1 flags");
              }
              c.mask = std::string(v);
            },
            [](const TrainConfig& c) { return c.mask; }},
      Field{"curated",
            [](TrainConfig& c, std::string_view, std::string_view v) { c.curated = std::string(v); },
            [](const TrainConfig& c) { return c.curated; }},
      GPN_INT_FIELD(samples_per_iteration, std::size_t),
  };
  return table;
}

#undef GPN_INT_FIELD
#undef GPN_DOUBLE_FIELD

}  // namespace

void apply_setting(TrainConfig& config, std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, key, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'", std::string(key));
}

TrainConfig parse_config_text(std::string_view text, TrainConfig config) {
  std::size_t start = 0;
  int line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value",
                        std::string(line));
    }
    apply_setting(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  config.validate();
  return config;
}

TrainConfig load_config_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), std::move(base));
}

std::string config_to_text(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config key '" + key + "': " + why, key);
  };
  if (!(policy_lr > 0)) fail("policy_lr", "must be positive");
  if (!(utility_lr > 0)) fail("utility_lr", "must be positive");
  if (!(reconstruction_lr > 0)) fail("reconstruction_lr", "must be positive");
  if (!(generator_lr > 0)) fail("generator_lr", "must be positive");
  if (entropy_coef < 0) fail("entropy_coef", "must be non-negative");
  if (!(elite_fraction >= 0 && elite_fraction < 1)) fail("elite_fraction", "must lie in [0, 1)");
  if (!(human_sample_rate >= 0 && human_sample_rate <= 1)) fail("human_sample_rate", "must lie in [0, 1]");
  if (batch_size < 2 || batch_size % 2 != 0) fail("batch_size", "must be even and at least 2");
  if (workers == 0) fail("workers", "must be at least 1");
  if (update_interval == 0) fail("update_interval", "must be at least 1");
  if (steps_per_iteration == 0) fail("steps_per_iteration", "must be positive");
  if (step_limit <= 0) fail("step_limit", "must be positive");
  if (!(monster_move_prob >= 0 && monster_move_prob <= 1)) fail("monster_move_prob", "must lie in [0, 1]");
  if (encoding == 0) fail("encoding", "must be positive");
  if (latent == 0) fail("latent", "must be positive");
  if (filters == 0) fail("filters", "must be positive");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout", "must lie in [0, 1)");
  if (mask.find('1') == std::string::npos) fail("mask", "must allow at least one tile");
  if (mode == TrainMode::semi && curated.empty()) fail("curated", "semi mode needs a curated directory");
}

agent::AgentConfig TrainConfig::agent_config() const {
  agent::AgentConfig c;
  c.conv_channels = agent_conv;
  c.residual_blocks = agent_residual_blocks;
  c.encoding = encoding;
  c.recurrent = recurrent;
  return c;
}

generator::GeneratorConfig TrainConfig::generator_config() const {
  generator::GeneratorConfig c;
  c.latent = latent;
  c.filters = filters;
  c.dropout = dropout;
  c.upsample = upsample;
  c.bridge_input = encoding;
  c.mask.clear();
  for (char ch : mask) c.mask.push_back(ch == '1' ? 1 : 0);
  return c;
}

agent::LearnerConfig TrainConfig::learner_config() const {
  return agent::LearnerConfig{policy_lr, utility_lr, entropy_coef};
}

dungeon::EnvConfig TrainConfig::env_config() const {
  dungeon::EnvConfig c;
  c.step_limit = step_limit;
  c.reward = reward;
  c.monster_move_prob = monster_move_prob;
  return c;
}

}  // namespace gpn
