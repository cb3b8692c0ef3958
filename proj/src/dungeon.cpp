#include "gpn/dungeon.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace gpn::dungeon {

char glyph(Tile tile) { return kGlyphs[static_cast<std::size_t>(tile)]; }

std::optional<Tile> tile_from_glyph(char c) {
  for (std::size_t i = 0; i < kGlyphs.size(); ++i)
    if (kGlyphs[i] == c) return static_cast<Tile>(i);
  return std::nullopt;
}

std::string_view origin_name(Origin origin) {
  switch (origin) {
    case Origin::generated: return "generated";
    case Origin::curated: return "curated";
    case Origin::elite: return "elite";
  }
  return "?";
}

std::string_view end_cause_name(EndCause cause) {
  switch (cause) {
    case EndCause::none: return "none";
    case EndCause::win: return "win";
    case EndCause::monster: return "monster";
    case EndCause::timeout: return "timeout";
    case EndCause::invalid: return "invalid";
  }
  return "?";
}

LevelMap::LevelMap(int height, int width, Tile fill, Origin origin)
    : height_(height), width_(width), origin_(origin) {
  if (height <= 0 || width <= 0) {
    throw std::invalid_argument("level dimensions must be positive, got " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  cells_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
}

std::size_t LevelMap::count(Tile tile) const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), tile));
}

Tensor<float> LevelMap::one_hot(std::size_t channels) const {
  if (channels < kTileKinds) {
    throw std::invalid_argument("one_hot needs at least " + std::to_string(kTileKinds) +
                                " channels, got " + std::to_string(channels));
  }
  const std::size_t plane = cells_.size();
  auto out = Tensor<float>::zeros({channels, static_cast<std::size_t>(height_),
                                   static_cast<std::size_t>(width_)});
  auto v = out.values();
  for (std::size_t i = 0; i < plane; ++i) v[static_cast<std::size_t>(cells_[i]) * plane + i] = 1.0f;
  return out;
}

LevelMap parse_level_text(std::string_view text, Origin origin) {
  std::vector<std::string_view> rows;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    rows.push_back(line);
    start = end + 1;
  }
  if (rows.empty() || rows.front().empty()) throw ParseError("empty level", 0, 0);

  const int height = static_cast<int>(rows.size());
  const int width = static_cast<int>(rows.front().size());
  LevelMap level(height, width, Tile::floor, origin);
  for (int r = 0; r < height; ++r) {
    const auto& line = rows[static_cast<std::size_t>(r)];
    if (static_cast<int>(line.size()) != width) {
      throw ParseError("ragged row " + std::to_string(r) + ": expected " + std::to_string(width) +
                           " glyphs, found " + std::to_string(line.size()),
                       r, std::min(width, static_cast<int>(line.size())));
    }
    for (int c = 0; c < width; ++c) {
      const char ch = line[static_cast<std::size_t>(c)];
      auto tile = tile_from_glyph(ch);
      if (!tile) {
        throw ParseError("unknown glyph '" + std::string(1, ch) + "' at row " + std::to_string(r) +
                             ", column " + std::to_string(c),
                         r, c);
      }
      level.set(r, c, *tile);
    }
  }
  return level;
}

std::string render_level(const LevelMap& level) {
  std::string out;
  out.reserve(static_cast<std::size_t>(level.height() * (level.width() + 1)));
  for (int r = 0; r < level.height(); ++r) {
    for (int c = 0; c < level.width(); ++c) out.push_back(glyph(level.at(r, c)));
    out.push_back('\n');
  }
  return out;
}

LevelMap load_level_file(const std::filesystem::path& path, Origin origin) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open level file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_level_text(buffer.str(), origin);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.row(), e.col());
  }
}

void save_level_file(const LevelMap& level, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write level file " + path.string());
  out << render_level(level);
}

std::vector<std::filesystem::path> list_level_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".lvl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

CompiledLevel compile_level(const LevelMap& level) {
  CompiledLevel out{level, true, {}};
  const auto avatars = level.count(Tile::avatar);
  if (avatars != 1) {
    out.reason = avatars == 0 ? "no avatar" : std::to_string(avatars) + " avatars";
  } else if (level.count(Tile::key) == 0) {
    out.reason = "no key";
  } else if (level.count(Tile::door) == 0) {
    out.reason = "no door";
  }
  out.valid = out.reason.empty();
  return out;
}

namespace {

Position offset(Position p, Facing f) {
  switch (f) {
    case Facing::north: return {p.row - 1, p.col};
    case Facing::east: return {p.row, p.col + 1};
    case Facing::south: return {p.row + 1, p.col};
    case Facing::west: return {p.row, p.col - 1};
  }
  return p;
}

Facing facing_for(Action a) {
  switch (a) {
    case Action::up: return Facing::north;
    case Action::down: return Facing::south;
    case Action::left: return Facing::west;
    default: return Facing::east;
  }
}

}  // namespace

Environment::Environment(CompiledLevel level, EnvConfig config)
    : level_(std::move(level)), config_(config) {
  if (config_.step_limit <= 0) throw std::invalid_argument("step limit must be positive");
  if (config_.channels < kTileKinds) {
    throw std::invalid_argument("observation needs at least " + std::to_string(kTileKinds) +
                                " tile channels");
  }
}

GameState Environment::reset(std::uint64_t seed) const {
  GameState s;
  s.rng.seed(seed);
  s.step_limit = config_.step_limit;
  const auto& lv = level_.level;
  for (int r = 0; r < lv.height(); ++r) {
    for (int c = 0; c < lv.width(); ++c) {
      switch (lv.at(r, c)) {
        case Tile::avatar: s.avatar = {r, c}; break;
        case Tile::monster: s.monsters.push_back({r, c}); break;
        case Tile::key: s.keys.push_back({r, c}); break;
        default: break;
      }
    }
  }
  s.score_events = static_cast<int>(s.keys.size() + s.monsters.size());
  return s;
}

Tile Environment::cell(const GameState& state, int row, int col) const {
  const Tile t = level_.level.at(row, col);
  if (t == Tile::avatar || t == Tile::monster) return Tile::floor;
  if (t == Tile::key) {
    const Position p{row, col};
    return std::find(state.keys.begin(), state.keys.end(), p) != state.keys.end() ? Tile::key
                                                                                    : Tile::floor;
  }
  return t;
}

bool Environment::blocked_for_avatar(const GameState& state, Position p) const {
  if (!level_.level.in_bounds(p.row, p.col)) return true;
  const Tile t = cell(state, p.row, p.col);
  return t == Tile::wall || (t == Tile::door && !state.has_key);
}

bool Environment::open_for_monster(Position p) const {
  return level_.level.in_bounds(p.row, p.col) && level_.level.at(p.row, p.col) != Tile::wall;
}

StepOutcome Environment::step(GameState& s, Action action) const {
  if (s.outcome != Outcome::ongoing) {
    throw std::logic_error("step on a finished episode");
  }
  const bool shaped = config_.reward == RewardMode::shaped;
  const double win_reward = shaped ? 2.0 : 1.0;
  const double event_reward = shaped && s.score_events > 0 ? 1.0 / s.score_events : 0.0;
  double reward = 0.0;

  auto finish = [&](Outcome outcome, EndCause cause) {
    s.outcome = outcome;
    s.cause = cause;
    reward += outcome == Outcome::win ? win_reward : -win_reward;
  };
  auto monster_hit = [&] {
    return std::find(s.monsters.begin(), s.monsters.end(), s.avatar) != s.monsters.end();
  };

  ++s.t;
  if (!level_.valid) {
    finish(Outcome::loss, EndCause::invalid);
  } else {
    if (action == Action::use) {
      const Position target = offset(s.avatar, s.facing);
      auto it = std::find(s.monsters.begin(), s.monsters.end(), target);
      if (it != s.monsters.end()) {
        s.monsters.erase(it);
        reward += event_reward;
      }
    } else {
      s.facing = facing_for(action);
      const Position target = offset(s.avatar, s.facing);
      if (!blocked_for_avatar(s, target)) {
        s.avatar = target;
        auto key = std::find(s.keys.begin(), s.keys.end(), target);
        if (key != s.keys.end()) {
          s.keys.erase(key);
          s.has_key = true;
          reward += event_reward;
        } else if (level_.level.at(target.row, target.col) == Tile::door) {
          finish(Outcome::win, EndCause::win);
        }
      }
    }
    if (s.outcome == Outcome::ongoing && monster_hit()) finish(Outcome::loss, EndCause::monster);

    if (s.outcome == Outcome::ongoing) {
      std::bernoulli_distribution moves(config_.monster_move_prob);
      for (auto& m : s.monsters) {
        if (!moves(s.rng)) continue;
        std::array<Position, 4> options{};
        std::size_t n = 0;
        for (Facing f : {Facing::north, Facing::east, Facing::south, Facing::west}) {
          const Position p = offset(m, f);
          if (open_for_monster(p)) options[n++] = p;
        }
        if (n == 0) continue;
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        m = options[pick(s.rng)];
      }
      if (monster_hit()) finish(Outcome::loss, EndCause::monster);
    }
    if (s.outcome == Outcome::ongoing && s.t >= s.step_limit) {
      finish(Outcome::loss, EndCause::timeout);
    }
  }
  return StepOutcome{observe(s), reward, s.outcome != Outcome::ongoing, s.cause};
}

Tensor<float> Environment::observe(const GameState& s) const {
  const auto& lv = level_.level;
  const std::size_t h = static_cast<std::size_t>(lv.height());
  const std::size_t w = static_cast<std::size_t>(lv.width());
  const std::size_t plane = h * w;
  const std::size_t channels = config_.channels;
  auto out = Tensor<float>::zeros({channels + 1, h, w});
  auto v = out.values();

  std::vector<Tile> tiles(plane);
  if (level_.valid) {
    for (int r = 0; r < lv.height(); ++r)
      for (int c = 0; c < lv.width(); ++c)
        tiles[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] = cell(s, r, c);
    for (const auto& m : s.monsters)
      tiles[static_cast<std::size_t>(m.row) * w + static_cast<std::size_t>(m.col)] = Tile::monster;
    tiles[static_cast<std::size_t>(s.avatar.row) * w + static_cast<std::size_t>(s.avatar.col)] =
        Tile::avatar;
  } else {
    // Uncompilable levels are shown as designed.
    tiles = lv.cells();
  }
  for (std::size_t i = 0; i < plane; ++i) v[static_cast<std::size_t>(tiles[i]) * plane + i] = 1.0f;
  if (s.has_key) std::fill(v.begin() + static_cast<long>(channels * plane), v.end(), 1.0f);
  return out;
}

std::string Environment::render(const GameState& s) const {
  const auto& lv = level_.level;
  if (!level_.valid) return render_level(lv);
  std::vector<std::string> rows(static_cast<std::size_t>(lv.height()));
  for (int r = 0; r < lv.height(); ++r)
    for (int c = 0; c < lv.width(); ++c) rows[static_cast<std::size_t>(r)].push_back(glyph(cell(s, r, c)));
  for (const auto& m : s.monsters)
    rows[static_cast<std::size_t>(m.row)][static_cast<std::size_t>(m.col)] = glyph(Tile::monster);
  rows[static_cast<std::size_t>(s.avatar.row)][static_cast<std::size_t>(s.avatar.col)] =
      s.has_key ? kAvatarWithKeyGlyph : glyph(Tile::avatar);
  std::string out;
  for (const auto& row : rows) out += row + "\n";
  return out;
}

}  // namespace gpn::dungeon
