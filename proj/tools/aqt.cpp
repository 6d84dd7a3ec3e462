// aqt: train, evaluate and visualize action Q-transformer agents.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "aqt/app.hpp"
#include "aqt/serialize.hpp"

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kIoError = 2, kNumericError = 3 };

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "key = value config file");
  cmd->add_option("--seed", flags.seed, "random seed");
  cmd->add_option("--out", flags.out, "output directory");
  cmd->add_option("--set", flags.overrides, "config override key=value (repeatable)");
}

aqt::app::RunConfig build_config(const CommonFlags& flags) {
  auto config = flags.config.empty() ? aqt::app::RunConfig{} : aqt::app::RunConfig::load(flags.config);
  for (const auto& o : flags.overrides) aqt::app::apply_override(config, o);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.out = flags.out;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Action Q-transformer agents on pixel Catch"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  std::string baseline;
  std::string alpha_schedule;
  auto* train = app.add_subcommand("train", "train the AQT network (optionally with a TTQ baseline)");
  add_common(train, train_flags);
  train->add_option("--baseline", baseline, "frozen baseline checkpoint for the TTQ loss");
  train->add_option("--alpha-schedule", alpha_schedule, "linear_decay[:alpha0:steps] or fixed:<value>");

  CommonFlags baseline_flags;
  auto* train_baseline = app.add_subcommand("train-baseline", "train the convolutional baseline network");
  add_common(train_baseline, baseline_flags);

  CommonFlags eval_flags;
  std::string eval_checkpoint;
  std::size_t eval_episodes = 100;
  std::string q_log;
  std::string dump_frames;
  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--episodes", eval_episodes, "number of episodes");
  eval->add_option("--q-log", q_log, "per-frame Q-value log (JSON lines); default <out>/eval_q.jsonl");
  eval->add_option("--dump-frames", dump_frames, "write every observation stack under this directory");

  CommonFlags viz_flags;
  std::string viz_checkpoint;
  std::size_t viz_episodes = 1;
  std::string frames;
  auto* visualize = app.add_subcommand("visualize", "write attention heatmaps for greedy rollouts");
  add_common(visualize, viz_flags);
  visualize->add_option("--checkpoint", viz_checkpoint, "aqt checkpoint")->required();
  visualize->add_option("--episodes", viz_episodes, "number of live episodes");
  visualize->add_option("--frames", frames, "dumped episode directory to replay instead of live rollouts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) {
      auto config = build_config(train_flags);
      if (!baseline.empty()) config.baseline = baseline;
      if (!alpha_schedule.empty()) config.train.ttq = aqt::train::TtqSchedule::parse(alpha_schedule);
      const auto s = aqt::app::cmd_train(config, std::cout);
      std::cout << "checkpoint " << s.checkpoint.string() << "\n";
    } else if (*train_baseline) {
      const auto s = aqt::app::cmd_train_baseline(build_config(baseline_flags), std::cout);
      std::cout << "checkpoint " << s.checkpoint.string() << "\n";
    } else if (*eval) {
      const auto config = build_config(eval_flags);
      aqt::app::EvalOptions options;
      options.episodes = eval_episodes;
      options.seed = aqt::app::eval_seed(config.seed);
      options.q_log = q_log.empty() ? std::filesystem::path(config.out) / "eval_q.jsonl" : std::filesystem::path(q_log);
      if (!dump_frames.empty()) options.dump_frames = dump_frames;
      const auto stats = aqt::app::cmd_eval(eval_checkpoint, config, options);
      for (std::size_t e = 0; e < stats.returns.size(); ++e) {
        std::cout << "episode " << e << " return " << stats.returns[e] << "\n";
      }
      std::cout << "mean " << stats.mean << " std " << stats.std << " over " << stats.returns.size() << " episodes\n";
    } else if (*visualize) {
      const auto config = build_config(viz_flags);
      aqt::app::VisualizeOptions options;
      options.episodes = viz_episodes;
      options.seed = aqt::app::eval_seed(config.seed);
      options.out = std::filesystem::path(config.out) / "attention";
      if (!frames.empty()) options.frames = frames;
      const auto s = aqt::app::cmd_visualize(viz_checkpoint, config, options);
      std::cout << "wrote " << s.frames << " frames from " << s.episodes << " episodes under "
                << options.out.string() << "\n";
    }
  } catch (const aqt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const aqt::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIoError;
  } catch (const aqt::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
