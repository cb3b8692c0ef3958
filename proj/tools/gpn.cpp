#include <algorithm>
#include <atomic>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gpn/checkpoint.hpp"
#include "gpn/config.hpp"
#include "gpn/trainer.hpp"

namespace fs = std::filesystem;
using namespace gpn;

namespace {

std::atomic<bool> g_interrupted{false};

void on_interrupt(int) { g_interrupted = true; }

struct TrainArgs {
  std::string config;
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  std::uint64_t frames = 0;
  std::size_t iterations = 0;
  std::string out = "runs/default";
  bool resume = false;
  std::string curated;
  std::vector<std::string> settings;
};

// Agent and generator rebuilt from a checkpoint, without the training state.
struct LoadedModels {
  TrainConfig config;
  agent::AgentModel<float> agent;
  generator::GeneratorModel<float> gen;

  explicit LoadedModels(const checkpoint::Archive& archive, Rng rng = Rng(0))
      : config(trainer::Trainer::config_from_archive(archive)),
        agent(config.agent_config(), rng),
        gen(config.generator_config(), rng) {
    checkpoint::get_params(archive, agent.named_parameters());
    checkpoint::get_params(archive, gen.named_parameters());
  }
};

int cmd_train(const TrainArgs& args, const CLI::App& app) {
  fs::path out = args.out;
  if (const char* env = std::getenv("GPN_OUT"); env && *env) out = env;
  const auto checkpoint_path = out / "checkpoint.gpnf";

  std::unique_ptr<trainer::Trainer> t;
  if (args.resume) {
    if (!fs::exists(checkpoint_path)) {
      std::cerr << "error: nothing to resume, " << checkpoint_path << " does not exist\n";
      return 1;
    }
    const auto archive = checkpoint::Archive::load(checkpoint_path);
    auto config = trainer::Trainer::config_from_archive(archive);
    if (app.count("--frames")) config.frames = args.frames;
    if (app.count("--iterations")) config.iterations = args.iterations;
    if (app.count("--workers")) config.workers = args.workers;
    if (app.count("--curated")) config.curated = args.curated;
    config.validate();
    t = std::make_unique<trainer::Trainer>(config);
    t->restore(archive);
    std::cerr << "resumed " << checkpoint_path << " at iteration " << t->iteration() << ", " << t->frames()
              << " frames\n";
  } else {
    TrainConfig config;
    if (!args.config.empty()) config = load_config_file(args.config);
    if (app.count("--mode")) apply_setting(config, "mode", args.mode);
    if (app.count("--seed")) config.seed = args.seed;
    if (app.count("--workers")) config.workers = args.workers;
    if (app.count("--frames")) config.frames = args.frames;
    if (app.count("--iterations")) config.iterations = args.iterations;
    if (app.count("--curated")) config.curated = args.curated;
    for (const auto& s : args.settings) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'", s);
      apply_setting(config, s.substr(0, eq), s.substr(eq + 1));
    }
    config.validate();
    if (fs::exists(checkpoint_path)) {
      std::cerr << "error: " << checkpoint_path << " already exists; pass --resume or choose another --out\n";
      return 1;
    }
    t = std::make_unique<trainer::Trainer>(config);
    fs::create_directories(out);
    std::ofstream(out / "config.cfg") << config_to_text(config);
  }

  std::signal(SIGINT, on_interrupt);
  std::signal(SIGTERM, on_interrupt);
  const auto stop_file = out / "STOP";
  auto stop = [&] {
    if (g_interrupted) return true;
    if (fs::exists(stop_file)) {
      fs::remove(stop_file);
      return true;
    }
    return false;
  };
  std::cerr << "training (" << mode_name(t->config().mode) << ", seed " << t->config().seed << ", "
            << t->config().workers << " workers) into " << out << "\n";
  t->run(out, stop, &std::cerr);
  if (g_interrupted || t->budget_left()) {
    std::cerr << "stopped after iteration " << t->iteration() << "; resume with --resume\n";
  } else {
    std::cerr << "budget reached after iteration " << t->iteration() << "\n";
  }
  return 0;
}

int cmd_sample(const std::string& ckpt, std::size_t count, const fs::path& out, std::uint64_t seed) {
  const auto archive = checkpoint::Archive::load(ckpt);
  LoadedModels models(archive);
  fs::create_directories(out);
  std::ofstream manifest(out / "manifest.csv");
  manifest << "file,valid,reason,estimated_utility\n";
  Rng rng(seed);
  std::size_t valid = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < count; start += kChunk) {
    const std::size_t n = std::min(kChunk, count - start);
    Tape<float> tape(false);
    const auto z = generator::sample_latents<float>(n, models.config.latent, rng);
    const auto probs = models.gen.generate(tape, z, false, rng);
    for (std::size_t i = 0; i < n; ++i) {
      const auto level = generator::discretize_level(probs, i);
      const auto compiled = dungeon::compile_level(level);
      const dungeon::Environment env(compiled, models.config.env_config());
      const double u = agent::evaluate_observation(models.agent, env.observe(env.reset(0))).utility;
      std::ostringstream name;
      name << "sample_" << std::setw(4) << std::setfill('0') << start + i << ".lvl";
      dungeon::save_level_file(level, out / name.str());
      valid += compiled.valid ? 1 : 0;
      manifest << name.str() << ',' << (compiled.valid ? 1 : 0) << ',' << compiled.reason << ','
               << std::setprecision(9) << u << '\n';
    }
  }
  const double total = static_cast<double>(std::max<std::size_t>(count, 1));
  std::cout << "sampled " << count << " levels into " << out.string() << "\n"
            << "valid: " << valid << " (" << (count ? 100.0 * double(valid) / total : 0.0) << "%)\n"
            << "invalid: " << count - valid << " (" << (count ? 100.0 * double(count - valid) / total : 0.0)
            << "%)\n";
  return 0;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Levels laid out on a near-square grid, one blank column and row between cells.
std::string montage(const std::vector<dungeon::LevelMap>& levels) {
  if (levels.empty()) return "";
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(levels.size()))));
  int cell_w = 0, cell_h = 0;
  for (const auto& l : levels) {
    cell_w = std::max(cell_w, l.width());
    cell_h = std::max(cell_h, l.height());
  }
  std::string out;
  for (std::size_t row0 = 0; row0 < levels.size(); row0 += cols) {
    if (row0) out += '\n';
    for (int r = 0; r < cell_h; ++r) {
      std::string line;
      for (std::size_t i = row0; i < std::min(row0 + cols, levels.size()); ++i) {
        const auto rows = split_lines(dungeon::render_level(levels[i]));
        std::string cell = r < static_cast<int>(rows.size()) ? rows[static_cast<std::size_t>(r)] : "";
        cell.resize(static_cast<std::size_t>(cell_w), ' ');
        line += (i > row0 ? " " : "") + cell;
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      out += line + '\n';
    }
  }
  return out;
}

int cmd_render(const fs::path& path, const std::string& montage_path) {
  if (fs::is_directory(path)) {
    const auto files = dungeon::list_level_files(path);
    std::vector<dungeon::LevelMap> levels;
    for (const auto& f : files) {
      try {
        levels.push_back(dungeon::load_level_file(f));
      } catch (const dungeon::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
      }
      std::cout << "== " << f.filename().string() << "\n" << dungeon::render_level(levels.back()) << "\n";
    }
    if (!montage_path.empty()) {
      std::ofstream out(montage_path);
      if (!out) throw std::runtime_error("cannot write " + montage_path);
      out << montage(levels);
    }
    return 0;
  }
  if (!montage_path.empty()) throw std::invalid_argument("--montage needs a directory of levels");
  try {
    std::cout << dungeon::render_level(dungeon::load_level_file(path));
  } catch (const dungeon::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const fs::path& levels_dir, std::size_t episodes, bool greedy,
             std::uint64_t seed, const std::string& csv_path) {
  const auto archive = checkpoint::Archive::load(ckpt);
  LoadedModels models(archive);
  std::vector<fs::path> files;
  if (fs::is_directory(levels_dir)) files = dungeon::list_level_files(levels_dir);
  else files.push_back(levels_dir);

  std::ofstream file_out;
  if (!csv_path.empty()) {
    file_out.open(csv_path);
    if (!file_out) throw std::runtime_error("cannot write " + csv_path);
  }
  std::ostream& csv = csv_path.empty() ? std::cout : file_out;
  csv << "level,valid,episodes,win_rate,mean_reward,mean_length,estimated_utility,gap\n" << std::setprecision(9);

  Rng rng(seed);
  const auto mode = greedy ? agent::ActMode::greedy : agent::ActMode::sample;
  double sum_win = 0, sum_reward = 0, sum_u = 0, sum_len = 0;
  for (const auto& f : files) {
    const auto level = dungeon::load_level_file(f);
    const auto acfg = models.config.agent_config();
    if (level.height() != static_cast<int>(acfg.height) || level.width() != static_cast<int>(acfg.width)) {
      throw std::invalid_argument(f.string() + ": level is " + std::to_string(level.height()) + "x" +
                                  std::to_string(level.width()) + ", the agent plays " +
                                  std::to_string(acfg.height) + "x" + std::to_string(acfg.width));
    }
    const dungeon::Environment env(dungeon::compile_level(level), models.config.env_config());
    const double u = agent::evaluate_observation(models.agent, env.observe(env.reset(0))).utility;
    std::size_t wins = 0;
    double reward = 0.0, length = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
      auto state = env.reset(rng());
      auto obs = env.observe(state);
      std::vector<float> hidden;
      for (;;) {
        const auto ev = agent::evaluate_observation(models.agent, obs, hidden);
        auto step = env.step(state, static_cast<dungeon::Action>(agent::act(ev.dist, rng, mode)));
        if (models.config.recurrent) hidden = ev.hidden;
        obs = step.observation;
        reward += step.reward;
        length += 1;
        if (step.terminal) {
          wins += state.outcome == dungeon::Outcome::win ? 1 : 0;
          break;
        }
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(episodes, 1));
    const double mean = reward / n;
    csv << f.filename().string() << ',' << (env.valid() ? 1 : 0) << ',' << episodes << ','
        << static_cast<double>(wins) / n << ',' << mean << ',' << length / n << ',' << u << ','
        << std::abs(u - mean) << '\n';
    sum_win += static_cast<double>(wins) / n;
    sum_reward += mean;
    sum_u += u;
    sum_len += length / n;
  }
  if (!files.empty()) {
    const double k = static_cast<double>(files.size());
    csv << "ALL,," << episodes << ',' << sum_win / k << ',' << sum_reward / k << ',' << sum_len / k << ','
        << sum_u / k << ',' << std::abs(sum_u / k - sum_reward / k) << '\n';
  }
  return 0;
}

struct Series {
  std::string label;
  std::string color;
  std::vector<double> values;
};

// Minimal SVG line chart; NaN points are skipped.
void write_svg(const fs::path& path, const std::string& title, const std::vector<double>& x,
               const std::vector<Series>& series) {
  constexpr double kW = 640, kH = 400, kL = 60, kR = 20, kT = 40, kB = 40;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : series)
    for (double v : s.values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double x0 = x.empty() ? 0 : x.front(), x1 = x.empty() ? 1 : std::max(x.back(), x0 + 1);
  auto px = [&](double v) { return kL + (v - x0) / (x1 - x0) * (kW - kL - kR); };
  auto py = [&](double v) { return kH - kB - (v - lo) / (hi - lo) * (kH - kT - kB); };

  std::ofstream out(path);
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title
      << "</text>\n"
      << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
      << "\" stroke=\"black\"/>\n";
  for (double v : {lo, (lo + hi) / 2, hi}) {
    out << "<text x=\"" << kL - 4 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << v
        << "</text>\n";
  }
  out << "<text x=\"" << kW - kR << "\" y=\"" << kH - 10 << "\" text-anchor=\"end\" font-size=\"11\">frames "
      << x1 << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" points=\"";
    for (std::size_t i = 0; i < x.size() && i < s.values.size(); ++i) {
      if (std::isfinite(s.values[i])) out << px(x[i]) << ',' << py(s.values[i]) << ' ';
    }
    out << "\"/>\n<text x=\"" << kL + 10 << "\" y=\"" << kT + 14 * (k + 1) << "\" fill=\"" << s.color
        << "\" font-size=\"12\">" << s.label << "</text>\n";
  }
  out << "</svg>\n";
}

int cmd_plot(const fs::path& metrics_path, const fs::path& out) {
  std::ifstream in(metrics_path);
  if (!in) throw std::runtime_error("cannot open " + metrics_path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    for (std::string cell; std::getline(hs, cell, ',');) header.push_back(cell);
  }
  std::map<std::string, std::vector<double>> cols;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (!std::getline(ls, cell, ',')) cell.clear();
      cols[header[i]].push_back(cell.empty() ? NAN : std::strtod(cell.c_str(), nullptr));
    }
  }
  for (const char* need : {"frames", "mean_real_reward", "mean_estimated_utility", "failure_rate"}) {
    if (!cols.count(need)) throw std::runtime_error(metrics_path.string() + ": missing column " + need);
  }
  fs::create_directories(out);
  const auto& x = cols["frames"];
  write_svg(out / "reward_vs_utility.svg", "Real reward vs estimated U(s0)", x,
            {{"mean real reward", "steelblue", cols["mean_real_reward"]},
             {"mean estimated U(s0)", "firebrick", cols["mean_estimated_utility"]}});
  write_svg(out / "failure_rate.svg", "Uncompilable levels", x, {{"failure rate", "black", cols["failure_rate"]}});
  write_svg(out / "losses.svg", "Losses", x,
            {{"value", "steelblue", cols["value_loss"]},
             {"policy", "darkorange", cols["policy_loss"]},
             {"generator", "seagreen", cols["generator_loss"]},
             {"reconstruction", "purple", cols["reconstruction_loss"]}});
  write_svg(out / "diversity.svg", "Diversity D", x, {{"diversity", "seagreen", cols["diversity"]}});
  std::cout << "wrote " << x.size() << " iterations of plots into " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative playing networks: train an agent and a level generator together"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "run the agent/generator training loop");
  train_cmd->add_option("--config", train.config, "flat key = value config file");
  train_cmd->add_option("--mode", train.mode, "unsupervised or semi")
      ->check(CLI::IsMember({"unsupervised", "semi"}));
  train_cmd->add_option("--seed", train.seed, "random seed");
  train_cmd->add_option("--workers", train.workers, "rollout workers");
  train_cmd->add_option("--frames", train.frames, "frame budget (0 = none)");
  train_cmd->add_option("--iterations", train.iterations, "outer iteration budget (0 = none)");
  train_cmd->add_option("--out", train.out, "output directory (GPN_OUT overrides)");
  train_cmd->add_flag("--resume", train.resume, "continue from <out>/checkpoint.gpnf");
  train_cmd->add_option("--curated", train.curated, "directory of curated .lvl files");
  train_cmd->add_option("--set", train.settings, "extra key=value config settings");

  std::string sample_ckpt, sample_out = "samples";
  std::size_t sample_count = 9;
  std::uint64_t sample_seed = 0;
  auto* sample_cmd = app.add_subcommand("sample", "draw levels from a trained generator");
  sample_cmd->add_option("checkpoint", sample_ckpt, "checkpoint file")->required();
  sample_cmd->add_option("--count", sample_count, "number of levels");
  sample_cmd->add_option("--out", sample_out, "output directory");
  sample_cmd->add_option("--seed", sample_seed, "latent seed");

  std::string render_path, render_montage;
  auto* render_cmd = app.add_subcommand("render", "print levels as text");
  render_cmd->add_option("path", render_path, "level file or directory")->required();
  render_cmd->add_option("--montage", render_montage, "write a grid montage of a directory to this file");

  std::string eval_ckpt, eval_levels, eval_csv;
  std::size_t eval_episodes = 20;
  std::uint64_t eval_seed = 0;
  bool eval_greedy = false;
  auto* eval_cmd = app.add_subcommand("eval", "play levels with a trained agent and compare with U(s0)");
  eval_cmd->add_option("checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("levels", eval_levels, "level file or directory")->required();
  eval_cmd->add_option("--episodes", eval_episodes, "episodes per level");
  eval_cmd->add_option("--seed", eval_seed, "episode seed");
  eval_cmd->add_flag("--greedy", eval_greedy, "take the most likely action instead of sampling");
  eval_cmd->add_option("--csv", eval_csv, "write the report here instead of standard output");

  std::string plot_metrics, plot_out = "plots";
  auto* plot_cmd = app.add_subcommand("plot", "draw SVG charts from a metrics CSV");
  plot_cmd->add_option("metrics", plot_metrics, "metrics.csv")->required();
  plot_cmd->add_option("--out", plot_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train, *train_cmd);
    if (*sample_cmd) return cmd_sample(sample_ckpt, sample_count, sample_out, sample_seed);
    if (*render_cmd) return cmd_render(render_path, render_montage);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_levels, eval_episodes, eval_greedy, eval_seed, eval_csv);
    if (*plot_cmd) return cmd_plot(plot_metrics, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.what() == "unknown config key '" + e.key() + "'") {
      std::cerr << "known keys:";
      for (const auto& k : config_keys()) std::cerr << ' ' << k;
      std::cerr << "\n";
    }
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
