#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "aqt/env.hpp"
#include "aqt/model.hpp"
#include "aqt/train.hpp"

namespace aqt::app {

/// Everything one command needs. Text form is `key = value` lines; model,
/// env and trainer keys carry a "model.", "env." or "train." prefix.
struct RunConfig {
  model::AqtConfig model;
  env::EnvConfig env;
  train::TrainerConfig train;
  std::uint64_t seed = 1;
  std::uint64_t total_frames = 200'000;  // agent steps * env.action_repeat
  std::size_t eval_episodes = 100;
  std::uint64_t checkpoint_every = 0;   // agent steps; 0 keeps only the final checkpoint
  std::uint64_t log_every = 100;        // updates between metric lines
  std::string baseline;                 // frozen TTQ teacher checkpoint, optional
  std::string out = "runs/default";

  /// Cross-section checks: action count, input size and stack depth must
  /// agree between model and env.
  void validate() const;
  KeyValues to_key_values() const;
  static RunConfig from_key_values(const KeyValues& entries);
  static RunConfig parse(std::string_view text);
  std::string to_text() const;
  static RunConfig load(const std::filesystem::path& path);
  std::uint64_t total_agent_steps() const;
};

/// Applies a single `key=value` override on top of an existing config.
void apply_override(RunConfig& config, const std::string& assignment);

struct ReturnStats {
  std::vector<double> returns;
  double mean = 0;
  double std = 0;  // population standard deviation
};

ReturnStats summarize(std::vector<double> returns);

struct TrainSummary {
  std::filesystem::path checkpoint;
  std::uint64_t agent_steps = 0;
  std::uint64_t frames = 0;
  std::uint64_t updates = 0;
  std::size_t episodes = 0;
  ReturnStats final_eval;
};

/// Trains the AQT network (kind "aqt") or the convolutional baseline
/// (kind "rainbow"). Writes <out>/config.cfg, <out>/metrics.jsonl,
/// <out>/checkpoint.aqt and, when enabled, periodic checkpoints.
TrainSummary train_network(const RunConfig& config, const std::string& kind, std::ostream& log);
TrainSummary cmd_train(const RunConfig& config, std::ostream& log);
TrainSummary cmd_train_baseline(const RunConfig& config, std::ostream& log);

struct EvalOptions {
  std::size_t episodes = 100;
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> q_log;       // per-frame JSONL: episode, step, q, action
  std::optional<std::filesystem::path> dump_frames;  // observation stacks per episode
};

/// Greedy eval-mode rollouts of a network.
ReturnStats evaluate(model::QNetwork<float>& net, const env::EnvConfig& env_config, const EvalOptions& options);
/// Loads a checkpoint and evaluates it on the env described by `config`.
ReturnStats cmd_eval(const std::filesystem::path& checkpoint, const RunConfig& config, const EvalOptions& options);

struct VisualizeOptions {
  std::size_t episodes = 1;
  std::uint64_t seed = 1;
  std::filesystem::path out;
  std::optional<std::filesystem::path> frames;  // dumped episode directory instead of live rollouts
};

struct VisualizeSummary {
  std::size_t frames = 0;
  std::size_t episodes = 0;
};

/// Writes <out>/<episode>/<frame>/{encoder.*, action_<k>.*, meta.txt} for
/// greedy live rollouts, or for every stack of a dumped episode.
VisualizeSummary cmd_visualize(const std::filesystem::path& checkpoint, const RunConfig& config,
                               const VisualizeOptions& options);

/// Rebuilds an observation from a dumped [depth, H, W] stack.
env::Observation observation_from_tensor(const Tensor& stack);

/// Mean return of the uniform random policy over `episodes` episodes.
ReturnStats random_policy_returns(const env::EnvConfig& env_config, std::size_t episodes, std::uint64_t seed);

/// Seed used for evaluation environments derived from a run seed.
std::uint64_t eval_seed(std::uint64_t run_seed);

}  // namespace aqt::app
