#include "aqt/app.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "aqt/checkpoint.hpp"
#include "aqt/serialize.hpp"
#include "aqt/viz.hpp"

namespace aqt::app {

namespace {

using nlohmann::json;

bool strip_prefix(const std::string& key, const std::string& prefix, std::string& rest) {
  if (key.rfind(prefix, 0) != 0) return false;
  rest = key.substr(prefix.size());
  return true;
}

void append_prefixed(KeyValues& out, const std::string& prefix, const KeyValues& entries) {
  for (const auto& [key, value] : entries) out.emplace_back(prefix + key, value);
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::vector<float> greedy_q(model::QNetwork<float>& net, const env::Observation& obs) {
  NoGradGuard no_grad;
  const auto x = obs.to_tensor<float>();
  const auto head = net.forward(reshape(x, Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]}), nn::Mode::Eval);
  const auto q = model::distributions_and_q(head, net.support()).second;
  return {q.data().begin(), q.data().end()};
}

void check_compatible(const model::AqtConfig& net_config, const env::EnvConfig& env_config) {
  const auto game = env::make_game(env_config);
  if (net_config.num_actions != game->num_actions() || net_config.input_height != env_config.observation_height ||
      net_config.input_width != env_config.observation_width ||
      net_config.frames_stacked != env_config.frame_stack) {
    throw ConfigError("checkpoint network does not match the environment (actions, input size or frame stack)");
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  env.validate();
  train.validate();
  const auto game = env::make_game(env);
  if (model.num_actions != game->num_actions()) {
    throw ConfigError("model.num_actions = " + std::to_string(model.num_actions) + " but env.game '" + env.game +
                      "' has " + std::to_string(game->num_actions()) + " actions");
  }
  if (model.input_height != env.observation_height || model.input_width != env.observation_width) {
    throw ConfigError("model input size must equal the env observation size");
  }
  if (model.frames_stacked != env.frame_stack) throw ConfigError("model.frames_stacked must equal env.frame_stack");
  if (total_frames == 0) throw ConfigError("total_frames must be >= 1");
  if (eval_episodes == 0) throw ConfigError("eval_episodes must be >= 1");
  if (log_every == 0) throw ConfigError("log_every must be >= 1");
}

KeyValues RunConfig::to_key_values() const {
  KeyValues entries{
      {"seed", std::to_string(seed)},
      {"total_frames", std::to_string(total_frames)},
      {"eval_episodes", std::to_string(eval_episodes)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"log_every", std::to_string(log_every)},
      {"baseline", baseline},
      {"out", out},
  };
  append_prefixed(entries, "model.", model.to_key_values());
  append_prefixed(entries, "env.", env.to_key_values());
  append_prefixed(entries, "train.", train.to_key_values());
  return entries;
}

RunConfig RunConfig::from_key_values(const KeyValues& entries) {
  RunConfig c;
  KeyValues model_entries;
  KeyValues env_entries;
  KeyValues train_entries;
  std::string rest;
  for (const auto& [key, value] : entries) {
    if (strip_prefix(key, "model.", rest)) model_entries.emplace_back(rest, value);
    else if (strip_prefix(key, "env.", rest)) env_entries.emplace_back(rest, value);
    else if (strip_prefix(key, "train.", rest)) train_entries.emplace_back(rest, value);
    else if (key == "seed") c.seed = parse_u64(key, value);
    else if (key == "total_frames") c.total_frames = parse_u64(key, value);
    else if (key == "eval_episodes") c.eval_episodes = parse_size(key, value);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_u64(key, value);
    else if (key == "log_every") c.log_every = parse_u64(key, value);
    else if (key == "baseline") c.baseline = value;
    else if (key == "out") c.out = value;
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.model = model::AqtConfig::from_key_values(model_entries);
  c.env = env::EnvConfig::from_key_values(env_entries);
  c.train = train::TrainerConfig::from_key_values(train_entries);
  return c;
}

RunConfig RunConfig::parse(std::string_view text) { return from_key_values(parse_key_values(text)); }

std::string RunConfig::to_text() const { return format_key_values(to_key_values()); }

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse(text.str());
}

std::uint64_t RunConfig::total_agent_steps() const {
  const std::uint64_t repeat = env.action_repeat;
  return (total_frames + repeat - 1) / repeat;
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value, got '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  const std::string key = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  auto entries = config.to_key_values();
  const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& kv) { return kv.first == key; });
  if (it == entries.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  config = RunConfig::from_key_values(entries);
}

ReturnStats summarize(std::vector<double> returns) {
  ReturnStats s;
  s.returns = std::move(returns);
  if (s.returns.empty()) return s;
  const double n = static_cast<double>(s.returns.size());
  s.mean = std::accumulate(s.returns.begin(), s.returns.end(), 0.0) / n;
  double sq = 0;
  for (const double r : s.returns) sq += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(sq / n);
  return s;
}

std::uint64_t eval_seed(std::uint64_t run_seed) { return run_seed * 6364136223846793005ull + 1442695040888963407ull; }

TrainSummary train_network(const RunConfig& config, const std::string& kind, std::ostream& log) {
  config.validate();
  if (kind != "aqt" && kind != "rainbow") throw ConfigError("unknown network kind '" + kind + "'");
  const std::filesystem::path out_dir = config.out;

  std::unique_ptr<model::QNetwork<float>> baseline;
  if (kind == "aqt" && !config.baseline.empty()) {
    if (!std::filesystem::exists(config.baseline)) throw IoError("baseline checkpoint not found: " + config.baseline);
    baseline = model::load_network<float>(config.baseline);
    log << "baseline " << baseline->kind() << " loaded from " << config.baseline << ", alpha schedule "
        << config.train.ttq.to_string() << "\n";
  } else if (kind == "aqt") {
    log << "no baseline checkpoint given; alpha schedule ignored and only the distributional loss is trained\n";
  }

  ensure_directory(out_dir);
  {
    auto cfg = open_output(out_dir / "config.cfg");
    cfg << config.to_text();
  }
  auto metrics = open_output(out_dir / "metrics.jsonl");

  nn::Rng init_rng(config.seed);
  auto online = model::make_network<float>(kind, config.model, init_rng);
  train::Trainer trainer(std::move(online), config.train, config.seed + 1, std::move(baseline));
  env::ToyEnv env(config.env, config.seed + 2);

  const std::uint64_t total_steps = config.total_agent_steps();
  const std::uint64_t repeat = config.env.action_repeat;
  TrainSummary summary;
  std::vector<double> recent;
  env::Observation obs = env.reset();
  double episode_return = 0;
  std::size_t episode_length = 0;
  std::vector<std::uint64_t> chosen(config.model.num_actions, 0);  // since the last update record

  while (trainer.agent_steps() < total_steps) {
    const int action = trainer.act(obs, nn::Mode::Train);
    ++chosen[static_cast<std::size_t>(action)];
    auto result = env.step(action);
    episode_return += result.reward;
    ++episode_length;
    train::RawStep step{obs, action, result.reward, result.observation, result.done && !result.truncated};
    obs = result.observation;
    const auto update = trainer.observe(std::move(step), result.done);
    if (update && update->update % config.log_every == 0) {
      metrics << json{{"type", "update"},
                      {"update", update->update},
                      {"agent_steps", trainer.agent_steps()},
                      {"frames", trainer.agent_steps() * repeat},
                      {"loss", update->loss},
                      {"aqt_loss", update->aqt_loss},
                      {"ttq_loss", update->ttq_loss},
                      {"alpha", update->alpha},
                      {"beta", update->beta},
                      {"grad_norm", update->grad_norm},
                      {"actions", chosen}}
                     .dump()
              << "\n";
      std::fill(chosen.begin(), chosen.end(), 0);
    }
    if (result.done) {
      metrics << json{{"type", "episode"},
                      {"episode", summary.episodes},
                      {"return", episode_return},
                      {"length", episode_length},
                      {"agent_steps", trainer.agent_steps()}}
                     .dump()
              << "\n";
      recent.push_back(episode_return);
      ++summary.episodes;
      if (recent.size() == 500) {
        log << "steps " << trainer.agent_steps() << " frames " << trainer.agent_steps() * repeat << " updates "
            << trainer.updates() << " mean return (last 500 episodes) " << summarize(recent).mean << std::endl;
        recent.clear();
      }
      episode_return = 0;
      episode_length = 0;
      obs = env.reset();
    }
    if (config.checkpoint_every > 0 && trainer.agent_steps() % config.checkpoint_every == 0) {
      model::save_checkpoint(out_dir / ("checkpoint_" + std::to_string(trainer.agent_steps()) + ".aqt"),
                             trainer.online());
    }
  }
  metrics.flush();

  summary.checkpoint = out_dir / "checkpoint.aqt";
  model::save_checkpoint(summary.checkpoint, trainer.online());
  summary.agent_steps = trainer.agent_steps();
  summary.frames = summary.agent_steps * repeat;
  summary.updates = trainer.updates();

  EvalOptions eval;
  eval.episodes = config.eval_episodes;
  eval.seed = eval_seed(config.seed);
  summary.final_eval = evaluate(trainer.online(), config.env, eval);
  {
    auto result = open_output(out_dir / "eval.json");
    result << json{{"episodes", eval.episodes},
                   {"mean_return", summary.final_eval.mean},
                   {"std_return", summary.final_eval.std},
                   {"agent_steps", summary.agent_steps},
                   {"frames", summary.frames},
                   {"updates", summary.updates}}
                  .dump(2)
           << "\n";
  }
  log << "trained " << kind << " for " << summary.frames << " frames (" << summary.updates << " updates); greedy mean return over "
      << eval.episodes << " episodes: " << summary.final_eval.mean << " (std " << summary.final_eval.std << ")\n";
  return summary;
}

TrainSummary cmd_train(const RunConfig& config, std::ostream& log) { return train_network(config, "aqt", log); }

TrainSummary cmd_train_baseline(const RunConfig& config, std::ostream& log) {
  return train_network(config, "rainbow", log);
}

ReturnStats evaluate(model::QNetwork<float>& net, const env::EnvConfig& env_config, const EvalOptions& options) {
  if (options.episodes == 0) throw ConfigError("episodes must be >= 1");
  check_compatible(net.config(), env_config);
  env::ToyEnv env(env_config, options.seed);
  if (options.dump_frames) env.set_dump_directory(*options.dump_frames);
  std::optional<std::ofstream> q_log;
  if (options.q_log) {
    if (options.q_log->has_parent_path()) ensure_directory(options.q_log->parent_path());
    q_log.emplace(open_output(*options.q_log));
  }
  auto log_frame = [&](std::size_t episode, std::size_t step, const std::vector<float>& q, bool terminal) {
    if (!q_log) return;
    json line{{"episode", episode},
              {"step", step},
              {"q", std::vector<double>(q.begin(), q.end())},
              {"action", model::argmax<float>(q)}};
    if (terminal) line["terminal"] = true;
    *q_log << line.dump() << "\n";
  };
  std::vector<double> returns;
  for (std::size_t e = 0; e < options.episodes; ++e) {
    auto obs = env.reset();
    double total = 0;
    for (std::size_t t = 0;; ++t) {
      const auto q = greedy_q(net, obs);
      log_frame(e, t, q, false);
      const auto result = env.step(model::argmax<float>(q));
      total += result.reward;
      obs = result.observation;
      if (result.done) {
        if (q_log) log_frame(e, t + 1, greedy_q(net, obs), true);
        break;
      }
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

ReturnStats cmd_eval(const std::filesystem::path& checkpoint, const RunConfig& config, const EvalOptions& options) {
  config.env.validate();
  if (!std::filesystem::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
  auto net = model::load_network<float>(checkpoint);
  return evaluate(*net, config.env, options);
}

env::Observation observation_from_tensor(const Tensor& stack) {
  if (stack.dim() != 3) throw DimensionError("observation stack must be [depth, H, W]");
  const std::size_t depth = stack.shape()[0];
  const std::size_t h = stack.shape()[1];
  const std::size_t w = stack.shape()[2];
  env::Observation obs;
  for (std::size_t d = 0; d < depth; ++d) {
    const auto begin = stack.data().begin() + static_cast<std::ptrdiff_t>(d * h * w);
    obs.frames.push_back(std::make_shared<const env::Frame>(env::quantize(std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(h * w)), h, w)));
  }
  return obs;
}

VisualizeSummary cmd_visualize(const std::filesystem::path& checkpoint, const RunConfig& config,
                               const VisualizeOptions& options) {
  config.env.validate();
  if (!std::filesystem::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint.string());
  auto loaded = model::load_network<float>(checkpoint);
  auto* net = dynamic_cast<model::AqtNetwork<float>*>(loaded.get());
  if (!net) throw ConfigError("visualize needs an aqt checkpoint, got '" + loaded->kind() + "'");
  check_compatible(net->config(), config.env);
  const auto names = env::make_game(config.env)->action_names();

  VisualizeSummary summary;
  if (options.frames) {
    const auto stacks = env::load_dumped_episode(*options.frames);
    for (std::size_t t = 0; t < stacks.size(); ++t) {
      const auto frame = viz::visualize_frame(*net, observation_from_tensor(stacks[t]), names);
      viz::write_frame(frame, options.out / "0" / std::to_string(t));
      ++summary.frames;
    }
    summary.episodes = 1;
    return summary;
  }
  if (options.episodes == 0) throw ConfigError("episodes must be >= 1");
  env::ToyEnv env(config.env, options.seed);
  for (std::size_t e = 0; e < options.episodes; ++e) {
    auto obs = env.reset();
    for (std::size_t t = 0;; ++t) {
      const auto frame = viz::visualize_frame(*net, obs, names);
      viz::write_frame(frame, options.out / std::to_string(e) / std::to_string(t));
      ++summary.frames;
      const auto result = env.step(frame.selected);
      obs = result.observation;
      if (result.done) {
        viz::write_frame(viz::visualize_frame(*net, obs, names), options.out / std::to_string(e) / std::to_string(t + 1));
        ++summary.frames;
        break;
      }
    }
    ++summary.episodes;
  }
  return summary;
}

ReturnStats random_policy_returns(const env::EnvConfig& env_config, std::size_t episodes, std::uint64_t seed) {
  env::ToyEnv env(env_config, seed);
  env::Rng rng(seed + 1);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(env.num_actions()) - 1);
  std::vector<double> returns;
  for (std::size_t e = 0; e < episodes; ++e) {
    env.reset();
    double total = 0;
    for (bool done = false; !done;) {
      const auto r = env.step(pick(rng));
      total += r.reward;
      done = r.done;
    }
    returns.push_back(total);
  }
  return summarize(std::move(returns));
}

}  // namespace aqt::app
