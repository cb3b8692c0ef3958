#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gpn/config.hpp"

using namespace gpn;

TEST_CASE("defaults") {
  TrainConfig c;
  CHECK(c.policy_lr == doctest::Approx(2.5e-4));
  CHECK(c.utility_lr == doctest::Approx(2.5e-5));
  CHECK(c.reconstruction_lr == doctest::Approx(5e-5));
  CHECK(c.generator_lr == doctest::Approx(1e-4));
  CHECK(c.batch_size == 128);
  CHECK(c.generator_updates == 10);
  CHECK(c.diversity_updates == 90);
  CHECK(c.elite_fraction == doctest::Approx(0.30));
  CHECK(c.human_sample_rate == doctest::Approx(0.5));
  CHECK(c.update_interval == 5);
  CHECK(c.workers == 16);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("discount is not a setting") {
  const auto keys = config_keys();
  for (const char* k : {"gamma", "discount", "γ"}) {
    CHECK(std::find(keys.begin(), keys.end(), k) == keys.end());
  }
  TrainConfig c;
  CHECK_THROWS_AS(apply_setting(c, "gamma", "0.99"), ConfigError);
}

TEST_CASE("unknown key is named") {
  try {
    parse_config_text("seed = 3\nlerning_rate = 0.1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "lerning_rate");
    CHECK(std::string(e.what()).find("lerning_rate") != std::string::npos);
  }
}

TEST_CASE("parse text") {
  const auto c = parse_config_text(
      "# desk run\n"
      "mode = semi\n"
      "curated = fixtures/curated   # five levels\n"
      "seed=9\n"
      "\n"
      "policy_lr = 1e-3\n"
      "agent_conv = 8, 8, 4\n"
      "recurrent = true\n"
      "reward = shaped\n"
      "upsample = nearest\n"
      "mask = 110111\n");
  CHECK(c.mode == TrainMode::semi);
  CHECK(c.curated == "fixtures/curated");
  CHECK(c.seed == 9);
  CHECK(c.policy_lr == 1e-3);
  CHECK(c.agent_conv == std::vector<std::size_t>{8, 8, 4});
  CHECK(c.recurrent);
  CHECK(c.reward == dungeon::RewardMode::shaped);
  CHECK(c.upsample == ops::UpsampleMode::nearest);
  const auto g = c.generator_config();
  CHECK(g.mask == std::vector<std::uint8_t>{1, 1, 0, 1, 1, 1});
  CHECK(g.bridge_input == c.encoding);
  CHECK(c.learner_config().policy_lr == 1e-3);
}

TEST_CASE("bad values are rejected with the key") {
  auto key_of = [](const std::string& text) {
    try {
      parse_config_text(text);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<accepted>");
  };
  CHECK(key_of("seed = abc") == "seed");
  CHECK(key_of("policy_lr = 0") == "policy_lr");
  CHECK(key_of("utility_lr = -1") == "utility_lr");
  CHECK(key_of("generator_lr = nan") == "generator_lr");
  CHECK(key_of("elite_fraction = 1") == "elite_fraction");
  CHECK(key_of("elite_fraction = -0.1") == "elite_fraction");
  CHECK(key_of("batch_size = 7") == "batch_size");
  CHECK(key_of("mode = supervised") == "mode");
  CHECK(key_of("mode = semi") == "curated");
  CHECK(key_of("mask = 000000") == "mask");
  CHECK(key_of("mask = 11") == "mask");
  CHECK(key_of("workers = 0") == "workers");
  CHECK(key_of("elite_fraction = 0") == "<accepted>");
  CHECK_THROWS_AS(parse_config_text("just words"), ConfigError);
}

TEST_CASE("text round trip") {
  TrainConfig c;
  c.mode = TrainMode::semi;
  c.curated = "some/dir";
  c.seed = 123456789012345ULL;
  c.policy_lr = 0.1 + 0.2;
  c.entropy_coef = 1.0 / 3.0;
  c.agent_conv = {3, 5};
  c.recurrent = true;
  c.mask = "101011";
  c.reward = dungeon::RewardMode::shaped;
  const auto back = parse_config_text(config_to_text(c));
  CHECK(config_to_text(back) == config_to_text(c));
  CHECK(back.policy_lr == c.policy_lr);
  CHECK(back.entropy_coef == c.entropy_coef);
  CHECK(back.seed == c.seed);
}
