#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aqt/env.hpp"
#include "aqt/keyvalue.hpp"
#include "aqt/model.hpp"

namespace aqt::train {

using env::Observation;

/// One environment step as seen by the agent.
struct RawStep {
  Observation state;
  int action = 0;
  double reward = 0;
  Observation next_state;
  bool done = false;  // true terminal; truncation is not a terminal
};

struct Transition {
  Observation state;
  int action = 0;
  double n_step_reward = 0;
  Observation next_state;
  bool done = false;
  int n_used = 0;
};

/// Builds the n-step transition that starts at steps.front(): rewards are
/// clipped to [-1, 1] and discounted by gamma; the window stops early at a
/// terminal step.
Transition n_step_accumulate(std::span<const RawStep> steps, int n = 3, double gamma = 0.99);

/// Sliding window that turns a stream of raw steps into n-step transitions.
class NStepQueue {
 public:
  NStepQueue(int n, double gamma) : n_(n), gamma_(gamma) {}
  /// Returns the transitions completed by this step. `episode_end` flushes
  /// the window (terminal or truncated).
  std::vector<Transition> push(RawStep step, bool episode_end);
  void clear() { window_.clear(); }

 private:
  int n_;
  double gamma_;
  std::deque<RawStep> window_;
};

/// Binary sum tree over a fixed number of leaves.
class SumTree {
 public:
  explicit SumTree(std::size_t capacity);

  void set(std::size_t index, double value);
  double get(std::size_t index) const { return nodes_[leaf_offset_ + index]; }
  double total() const { return nodes_[1]; }
  /// Leaf whose cumulative interval contains `mass` in [0, total()).
  std::size_t find(double mass) const;
  std::size_t capacity() const { return capacity_; }

 private:
  std::size_t capacity_;
  std::size_t leaf_offset_;
  std::vector<double> nodes_;
};

struct ReplaySample {
  std::vector<std::size_t> indices;
  std::vector<double> probabilities;
  std::vector<double> weights;  // importance-sampling weights divided by their batch maximum
};

/// Proportional prioritized replay: P(i) = p_i^omega / sum_j p_j^omega.
class PrioritizedReplay {
 public:
  PrioritizedReplay(std::size_t capacity, double omega = 0.5, double min_priority = 1e-6);

  /// Inserts with the largest priority seen so far (1.0 before any update).
  void add(Transition transition);
  /// Stratified sampling: one draw from each of `batch` equal-mass segments.
  ReplaySample sample(std::size_t batch, double beta, env::Rng& rng) const;
  void update_priorities(std::span<const std::size_t> indices, std::span<const double> priorities);

  const Transition& at(std::size_t index) const { return items_[index]; }
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  double probability(std::size_t index) const { return tree_.get(index) / tree_.total(); }
  double priority(std::size_t index) const;
  double max_priority() const { return max_priority_; }

 private:
  std::size_t capacity_;
  double omega_;
  double min_priority_;
  std::vector<Transition> items_;
  std::size_t next_ = 0;
  SumTree tree_;
  double max_priority_ = 1.0;
};

/// Distributional Bellman projection of one next-state distribution onto the
/// fixed support: atom z_j moves to clamp(reward + discount * z_j) (discount
/// is ignored when done) and its mass is split linearly between the two
/// neighbouring atoms.
template <typename T>
std::vector<T> project_distribution(std::span<const T> next_dist, double reward, double discount, bool done,
                                    const model::Support<T>& support);

/// Double-Q categorical targets [B, atoms]: the online network picks
/// a* = argmax_a Q(next, a), the target network supplies the distribution.
template <typename T>
BasicTensor<T> categorical_targets(model::QNetwork<T>& online, model::QNetwork<T>& target,
                                   const BasicTensor<T>& next_obs, std::span<const double> rewards,
                                   std::span<const double> discounts, std::span<const std::uint8_t> dones);

template <typename T>
struct LossOutput {
  BasicTensor<T> loss;               // scalar
  std::vector<double> per_sample;    // unweighted cross-entropies
};

/// Importance-weighted cross-entropy between target distributions and the
/// online distribution of the taken actions: mean_b w_b * CE_b.
template <typename T>
LossOutput<T> rainbow_loss(const BasicTensor<T>& logits, std::span<const int> actions,
                           const BasicTensor<T>& target_dists, std::span<const double> weights);

/// Batch mean of (q_base[b] - Q_aqt(s_b, a_b))^2 on scalar expected values.
/// q_aqt is [B, A]; q_base holds the frozen baseline's values for the taken actions.
template <typename T>
BasicTensor<T> ttq_loss(const BasicTensor<T>& q_aqt, std::span<const int> actions, std::span<const double> q_base);

enum class AlphaPattern { LinearDecay, Fixed };

struct TtqSchedule {
  AlphaPattern pattern = AlphaPattern::LinearDecay;
  double alpha_0 = 1.0;
  std::uint64_t decay_steps = 25'000'000;
  double fixed_value = 0.0;

  /// "linear_decay", "linear_decay:<alpha_0>:<steps>", "fixed:<value>".
  static TtqSchedule parse(const std::string& text);
  std::string to_string() const;
  bool operator==(const TtqSchedule&) const = default;
};

double alpha_schedule(const TtqSchedule& schedule, std::uint64_t step);

/// The six alpha designs: linear decay and fixed 0.2, 0.4, 0.6, 0.8, 1.0.
std::vector<TtqSchedule> alpha_patterns(std::uint64_t decay_steps);

/// Adam over a parameter list, updating values in place.
template <typename T>
class Adam {
 public:
  Adam(nn::ParameterList<T> params, double lr, double epsilon, double beta1 = 0.9, double beta2 = 0.999);

  void zero_grad();
  void step();
  std::uint64_t steps() const { return t_; }

 private:
  nn::ParameterList<T> params_;
  double lr_;
  double epsilon_;
  double beta1_;
  double beta2_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const nn::ParameterList<T>& params, double max_norm);

struct TrainerConfig {
  std::size_t batch_size = 32;
  int multi_step = 3;
  double gamma = 0.99;
  double learning_rate = 6.25e-5;
  double adam_epsilon = 1.5e-4;
  std::uint64_t target_period = 8000;  // in updates
  std::size_t replay_capacity = 100'000;
  double priority_exponent = 0.5;
  double beta_start = 0.4;
  double beta_end = 1.0;
  std::uint64_t beta_steps = 50'000;  // agent steps over which beta anneals
  std::size_t learn_start = 1'000;    // agent steps before the first update
  std::size_t replay_period = 4;      // agent steps per update and per noise resample
  double grad_clip = 10.0;            // 0 disables
  bool use_aqt_loss = true;           // false leaves only the alpha-weighted TTQ term
  TtqSchedule ttq;

  void validate() const;
  KeyValues to_key_values() const;
  static TrainerConfig from_key_values(const KeyValues& entries);
};

struct TrainMetrics {
  std::uint64_t update = 0;
  double loss = 0;
  double aqt_loss = 0;
  double ttq_loss = 0;
  double alpha = 0;
  double grad_norm = 0;
  double beta = 0;
};

/// Online/target networks, optional frozen baseline, replay and optimiser.
class Trainer {
 public:
  Trainer(std::unique_ptr<model::QNetwork<float>> online, TrainerConfig config, std::uint64_t seed,
          std::unique_ptr<model::QNetwork<float>> baseline = nullptr);

  /// Greedy action under the online network. Train mode uses the current
  /// noise sample, refreshed every replay_period calls.
  int act(const Observation& obs, nn::Mode mode);
  /// Records one environment step; runs an update when one is due.
  std::optional<TrainMetrics> observe(RawStep step, bool episode_end);
  /// One gradient update on a sampled minibatch.
  TrainMetrics train_step();
  /// Gradient update on an explicit batch with explicit IS weights.
  TrainMetrics train_on(std::span<const Transition* const> batch, std::span<const double> weights,
                        std::vector<double>* priorities = nullptr);

  bool ready() const { return replay_.size() >= config_.batch_size; }
  double beta() const;
  std::uint64_t agent_steps() const { return agent_steps_; }
  std::uint64_t updates() const { return updates_; }
  void sync_target();

  model::QNetwork<float>& online() { return *online_; }
  model::QNetwork<float>& target() { return *target_; }
  model::QNetwork<float>* baseline() { return baseline_.get(); }
  PrioritizedReplay& replay() { return replay_; }
  const TrainerConfig& config() const { return config_; }
  nn::Rng& rng() { return rng_; }

 private:
  std::unique_ptr<model::QNetwork<float>> online_;
  std::unique_ptr<model::QNetwork<float>> target_;
  std::unique_ptr<model::QNetwork<float>> baseline_;
  TrainerConfig config_;
  nn::Rng rng_;
  PrioritizedReplay replay_;
  NStepQueue queue_;
  Adam<float> optimizer_;
  std::uint64_t agent_steps_ = 0;
  std::uint64_t act_calls_ = 0;
  std::uint64_t updates_ = 0;
};

}  // namespace aqt::train
