#include <cmath>

#include "aqt/train.hpp"

namespace aqt::train {

void TrainerConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (multi_step < 1) throw ConfigError("multi_step must be >= 1");
  if (!(gamma > 0 && gamma <= 1)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(learning_rate > 0) || !(adam_epsilon > 0)) throw ConfigError("learning_rate and adam_epsilon must be > 0");
  if (target_period == 0 || replay_period == 0) throw ConfigError("target_period and replay_period must be >= 1");
  if (replay_capacity < batch_size) throw ConfigError("replay_capacity must be at least batch_size");
  if (!(priority_exponent >= 0)) throw ConfigError("priority_exponent must be >= 0");
  if (beta_start < 0 || beta_start > 1 || beta_end < 0 || beta_end > 1) throw ConfigError("beta must lie in [0, 1]");
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
}

KeyValues TrainerConfig::to_key_values() const {
  return {
      {"batch_size", std::to_string(batch_size)},
      {"multi_step", std::to_string(multi_step)},
      {"gamma", format_double(gamma)},
      {"learning_rate", format_double(learning_rate)},
      {"adam_epsilon", format_double(adam_epsilon)},
      {"target_period", std::to_string(target_period)},
      {"replay_capacity", std::to_string(replay_capacity)},
      {"priority_exponent", format_double(priority_exponent)},
      {"beta_start", format_double(beta_start)},
      {"beta_end", format_double(beta_end)},
      {"beta_steps", std::to_string(beta_steps)},
      {"learn_start", std::to_string(learn_start)},
      {"replay_period", std::to_string(replay_period)},
      {"grad_clip", format_double(grad_clip)},
      {"aqt_loss", use_aqt_loss ? "true" : "false"},
      {"alpha_schedule", ttq.to_string()},
  };
}

TrainerConfig TrainerConfig::from_key_values(const KeyValues& entries) {
  TrainerConfig c;
  for (const auto& [key, value] : entries) {
    if (key == "batch_size") c.batch_size = parse_size(key, value);
    else if (key == "multi_step") c.multi_step = static_cast<int>(parse_size(key, value));
    else if (key == "gamma") c.gamma = parse_double(key, value);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "adam_epsilon") c.adam_epsilon = parse_double(key, value);
    else if (key == "target_period") c.target_period = parse_u64(key, value);
    else if (key == "replay_capacity") c.replay_capacity = parse_size(key, value);
    else if (key == "priority_exponent") c.priority_exponent = parse_double(key, value);
    else if (key == "beta_start") c.beta_start = parse_double(key, value);
    else if (key == "beta_end") c.beta_end = parse_double(key, value);
    else if (key == "beta_steps") c.beta_steps = parse_u64(key, value);
    else if (key == "learn_start") c.learn_start = parse_size(key, value);
    else if (key == "replay_period") c.replay_period = parse_size(key, value);
    else if (key == "grad_clip") c.grad_clip = parse_double(key, value);
    else if (key == "aqt_loss") c.use_aqt_loss = parse_bool(key, value);
    else if (key == "alpha_schedule") c.ttq = TtqSchedule::parse(value);
    else throw ConfigError("unknown train key '" + key + "'");
  }
  return c;
}

Trainer::Trainer(std::unique_ptr<model::QNetwork<float>> online, TrainerConfig config, std::uint64_t seed,
                 std::unique_ptr<model::QNetwork<float>> baseline)
    : online_(std::move(online)),
      target_(online_->clone()),
      baseline_(std::move(baseline)),
      config_((config.validate(), std::move(config))),
      rng_(seed),
      replay_(config_.replay_capacity, config_.priority_exponent),
      queue_(config_.multi_step, config_.gamma),
      optimizer_(online_->parameters(), config_.learning_rate, config_.adam_epsilon) {
  if (baseline_) {
    const auto& a = baseline_->config();
    const auto& b = online_->config();
    if (a.num_actions != b.num_actions || a.frames_stacked != b.frames_stacked || a.input_height != b.input_height ||
        a.input_width != b.input_width) {
      throw ConfigError("baseline network does not match the action count or input shape of the trained network");
    }
    baseline_->zero_noise();
  } else if (!config_.use_aqt_loss) {
    throw ConfigError("aqt_loss = false needs a baseline network");
  }
}

double Trainer::beta() const {
  if (config_.beta_steps == 0) return config_.beta_end;
  const double progress =
      std::min(1.0, static_cast<double>(agent_steps_) / static_cast<double>(config_.beta_steps));
  return config_.beta_start + (config_.beta_end - config_.beta_start) * progress;
}

void Trainer::sync_target() { target_->load_state_from(*online_); }

int Trainer::act(const Observation& obs, nn::Mode mode) {
  if (mode == nn::Mode::Train) {
    if (act_calls_ % config_.replay_period == 0) online_->resample_noise(rng_);
    ++act_calls_;
  }
  NoGradGuard no_grad;
  const auto x = obs.to_tensor<float>();
  const auto head = online_->forward(
      reshape(x, Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]}), mode);
  const auto [dist, q] = model::distributions_and_q(head, online_->support());
  return model::argmax<float>(q.data());
}

std::optional<TrainMetrics> Trainer::observe(RawStep step, bool episode_end) {
  ++agent_steps_;
  for (auto& t : queue_.push(std::move(step), episode_end)) replay_.add(std::move(t));
  if (agent_steps_ >= config_.learn_start && agent_steps_ % config_.replay_period == 0 && ready()) {
    return train_step();
  }
  return std::nullopt;
}

TrainMetrics Trainer::train_step() {
  if (!ready()) throw ContractError("replay holds fewer transitions than one minibatch");
  const auto sample = replay_.sample(config_.batch_size, beta(), rng_);
  std::vector<const Transition*> batch;
  batch.reserve(sample.indices.size());
  for (const auto index : sample.indices) batch.push_back(&replay_.at(index));
  std::vector<double> priorities;
  auto metrics = train_on(batch, sample.weights, &priorities);
  replay_.update_priorities(sample.indices, priorities);
  return metrics;
}

TrainMetrics Trainer::train_on(std::span<const Transition* const> batch, std::span<const double> weights,
                               std::vector<double>* priorities) {
  const std::size_t size = batch.size();
  online_->resample_noise(rng_);
  target_->resample_noise(rng_);

  std::vector<const Observation*> states;
  std::vector<const Observation*> next_states;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<double> discounts;
  std::vector<std::uint8_t> dones;
  for (const auto* t : batch) {
    states.push_back(&t->state);
    next_states.push_back(&t->next_state);
    actions.push_back(t->action);
    rewards.push_back(t->n_step_reward);
    discounts.push_back(std::pow(config_.gamma, t->n_used));
    dones.push_back(t->done ? 1 : 0);
  }
  const auto state_tensor = env::batch_tensor<float>(states);
  const auto next_tensor = env::batch_tensor<float>(next_states);
  const auto targets = categorical_targets(*online_, *target_, next_tensor, rewards, discounts, dones);

  TrainMetrics metrics;
  metrics.beta = beta();
  std::vector<double> q_base;
  if (baseline_) {
    NoGradGuard no_grad;
    const auto [dist, q] = model::distributions_and_q(baseline_->forward(state_tensor, nn::Mode::Eval),
                                                      baseline_->support());
    const std::size_t actions_count = baseline_->num_actions();
    for (std::size_t b = 0; b < size; ++b) {
      q_base.push_back(q.data()[b * actions_count + static_cast<std::size_t>(actions[b])]);
    }
    metrics.alpha = alpha_schedule(config_.ttq, agent_steps_);
  }

  optimizer_.zero_grad();
  const auto head = online_->forward(state_tensor, nn::Mode::Train);
  auto loss = rainbow_loss(head.logits, actions, targets, weights);
  auto total = loss.loss;
  metrics.aqt_loss = loss.loss.item();
  if (baseline_) {
    const auto q_aqt = model::expected_values(softmax(head.logits), online_->support());
    const auto ttq = ttq_loss(q_aqt, actions, q_base);
    metrics.ttq_loss = ttq.item();
    const auto weighted = scale(ttq, static_cast<float>(metrics.alpha));
    total = config_.use_aqt_loss ? add(total, weighted) : weighted;
  }
  metrics.loss = total.item();
  if (!std::isfinite(metrics.loss)) throw NumericError("non-finite training loss at update " + std::to_string(updates_));
  total.backward();
  metrics.grad_norm = clip_grad_norm(online_->parameters(), config_.grad_clip);
  optimizer_.step();

  ++updates_;
  metrics.update = updates_;
  if (updates_ % config_.target_period == 0) sync_target();
  if (priorities) *priorities = std::move(loss.per_sample);
  return metrics;
}

}  // namespace aqt::train
