#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gpn/tensor.hpp"

namespace gpn::dungeon {

using Rng = std::mt19937_64;

// Designable tile alphabet. The enumerator value is the one-hot channel.
enum class Tile : std::uint8_t { floor = 0, wall, avatar, key, door, monster };

inline constexpr std::size_t kTileKinds = 6;
inline constexpr std::array<char, kTileKinds> kGlyphs = {'.', 'w', 'A', '+', 'g', 'e'};
// Render-only glyph for the avatar while it carries a key.
inline constexpr char kAvatarWithKeyGlyph = 'K';

char glyph(Tile tile);
std::optional<Tile> tile_from_glyph(char c);

enum class Origin { generated, curated, elite };
std::string_view origin_name(Origin origin);

class LevelMap {
 public:
  LevelMap() = default;
  LevelMap(int height, int width, Tile fill = Tile::floor, Origin origin = Origin::generated);

  int height() const { return height_; }
  int width() const { return width_; }
  Origin origin() const { return origin_; }
  void set_origin(Origin origin) { origin_ = origin; }

  Tile at(int row, int col) const { return cells_[index(row, col)]; }
  void set(int row, int col, Tile tile) { cells_[index(row, col)] = tile; }
  bool in_bounds(int row, int col) const {
    return row >= 0 && col >= 0 && row < height_ && col < width_;
  }
  std::size_t count(Tile tile) const;
  const std::vector<Tile>& cells() const { return cells_; }

  // [channels, H, W] one-hot planes; channels beyond the designable alphabet
  // stay zero.
  Tensor<float> one_hot(std::size_t channels = kTileKinds) const;

  bool operator==(const LevelMap& other) const {
    return height_ == other.height_ && width_ == other.width_ && cells_ == other.cells_;
  }

 private:
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(col);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<Tile> cells_;
  Origin origin_ = Origin::generated;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int row, int col)
      : std::runtime_error(what), row_(row), col_(col) {}
  int row() const { return row_; }
  int col() const { return col_; }

 private:
  int row_;
  int col_;
};

// Rectangular glyph block, one row per line, optional trailing newline.
LevelMap parse_level_text(std::string_view text, Origin origin = Origin::curated);
std::string render_level(const LevelMap& level);

LevelMap load_level_file(const std::filesystem::path& path, Origin origin = Origin::curated);
void save_level_file(const LevelMap& level, const std::filesystem::path& path);
// All ".lvl" files in a directory, sorted by file name.
std::vector<std::filesystem::path> list_level_files(const std::filesystem::path& dir);

struct CompiledLevel {
  LevelMap level;
  bool valid = false;
  std::string reason;  // empty when valid
};

// Valid iff exactly one avatar, at least one key and at least one door.
CompiledLevel compile_level(const LevelMap& level);

enum class Action : std::uint8_t { up = 0, down, left, right, use };
inline constexpr std::size_t kActionCount = 5;

enum class Facing : std::uint8_t { north = 0, east, south, west };
enum class Outcome : std::uint8_t { ongoing, win, loss };
enum class EndCause : std::uint8_t { none, win, monster, timeout, invalid };
std::string_view end_cause_name(EndCause cause);

enum class RewardMode : std::uint8_t { pure, shaped };

struct EnvConfig {
  int step_limit = 500;
  RewardMode reward = RewardMode::pure;
  double monster_move_prob = 0.5;
  std::size_t channels = kTileKinds;  // tile planes in observations
};

struct Position {
  int row = 0;
  int col = 0;
  bool operator==(const Position&) const = default;
};

struct GameState {
  Position avatar;
  Facing facing = Facing::south;
  bool has_key = false;
  std::vector<Position> monsters;
  std::vector<Position> keys;
  int t = 0;
  int step_limit = 0;
  int score_events = 0;  // N of the shaped reward, fixed at reset
  Outcome outcome = Outcome::ongoing;
  EndCause cause = EndCause::none;
  Rng rng;
};

struct StepOutcome {
  Tensor<float> observation;
  double reward = 0.0;
  bool terminal = false;
  EndCause cause = EndCause::none;
};

class Environment {
 public:
  Environment(CompiledLevel level, EnvConfig config);

  const CompiledLevel& compiled() const { return level_; }
  const LevelMap& level() const { return level_.level; }
  bool valid() const { return level_.valid; }
  const EnvConfig& config() const { return config_; }

  GameState reset(std::uint64_t seed) const;
  StepOutcome step(GameState& state, Action action) const;

  // [channels + 1, H, W]: tile planes of the live state plus a has_key plane.
  Tensor<float> observe(const GameState& state) const;
  std::string render(const GameState& state) const;

  // Static tile at a cell, with picked-up keys removed.
  Tile cell(const GameState& state, int row, int col) const;

 private:
  bool blocked_for_avatar(const GameState& state, Position p) const;
  bool open_for_monster(Position p) const;

  CompiledLevel level_;
  EnvConfig config_;
};

}  // namespace gpn::dungeon
