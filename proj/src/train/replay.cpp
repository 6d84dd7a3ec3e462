#include <algorithm>
#include <cmath>

#include "aqt/train.hpp"

namespace aqt::train {

Transition n_step_accumulate(std::span<const RawStep> steps, int n, double gamma) {
  if (steps.empty()) throw ContractError("n_step_accumulate needs at least one step");
  if (n < 1) throw ContractError("multi-step length must be >= 1");
  Transition t;
  t.state = steps.front().state;
  t.action = steps.front().action;
  double discount = 1.0;
  const std::size_t window = std::min(steps.size(), static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < window; ++k) {
    t.n_step_reward += discount * std::clamp(steps[k].reward, -1.0, 1.0);
    discount *= gamma;
    t.n_used = static_cast<int>(k + 1);
    if (steps[k].done) {
      t.done = true;
      break;
    }
  }
  t.next_state = steps[static_cast<std::size_t>(t.n_used) - 1].next_state;
  return t;
}

std::vector<Transition> NStepQueue::push(RawStep step, bool episode_end) {
  window_.push_back(std::move(step));
  std::vector<Transition> out;
  auto emit = [&] {
    const std::vector<RawStep> steps(window_.begin(), window_.end());
    out.push_back(n_step_accumulate(steps, n_, gamma_));
    window_.pop_front();
  };
  if (window_.size() >= static_cast<std::size_t>(n_)) emit();
  if (episode_end) {
    while (!window_.empty()) emit();
  }
  return out;
}

SumTree::SumTree(std::size_t capacity) : capacity_(capacity), leaf_offset_(1) {
  if (capacity == 0) throw ContractError("sum tree capacity must be positive");
  while (leaf_offset_ < capacity) leaf_offset_ *= 2;
  nodes_.assign(2 * leaf_offset_, 0.0);
}

void SumTree::set(std::size_t index, double value) {
  if (index >= capacity_) throw ContractError("sum tree index out of range");
  if (!(value >= 0.0) || !std::isfinite(value)) throw NumericError("sum tree values must be finite and >= 0");
  std::size_t node = leaf_offset_ + index;
  nodes_[node] = value;
  for (node /= 2; node >= 1; node /= 2) nodes_[node] = nodes_[2 * node] + nodes_[2 * node + 1];
}

std::size_t SumTree::find(double mass) const {
  std::size_t node = 1;
  while (node < leaf_offset_) {
    const std::size_t left = 2 * node;
    if (mass < nodes_[left] || nodes_[left + 1] <= 0.0) {
      node = left;
    } else {
      mass -= nodes_[left];
      node = left + 1;
    }
  }
  return std::min(node - leaf_offset_, capacity_ - 1);
}

PrioritizedReplay::PrioritizedReplay(std::size_t capacity, double omega, double min_priority)
    : capacity_(capacity), omega_(omega), min_priority_(min_priority), tree_(capacity) {
  items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void PrioritizedReplay::add(Transition transition) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(transition));
  } else {
    items_[next_] = std::move(transition);
  }
  tree_.set(next_, std::pow(max_priority_, omega_));
  next_ = (next_ + 1) % capacity_;
}

ReplaySample PrioritizedReplay::sample(std::size_t batch, double beta, env::Rng& rng) const {
  if (items_.empty() || batch == 0) throw ContractError("cannot sample from an empty replay");
  const double total = tree_.total();
  const double segment = total / static_cast<double>(batch);
  ReplaySample out;
  out.indices.reserve(batch);
  double max_weight = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    std::uniform_real_distribution<double> dist(segment * static_cast<double>(i), segment * static_cast<double>(i + 1));
    const std::size_t index = tree_.find(std::min(dist(rng), std::nextafter(total, 0.0)));
    const double p = tree_.get(index) / total;
    const double w = std::pow(static_cast<double>(items_.size()) * p, -beta);
    out.indices.push_back(index);
    out.probabilities.push_back(p);
    out.weights.push_back(w);
    max_weight = std::max(max_weight, w);
  }
  for (auto& w : out.weights) w /= max_weight;
  return out;
}

void PrioritizedReplay::update_priorities(std::span<const std::size_t> indices, std::span<const double> priorities) {
  if (indices.size() != priorities.size()) throw ContractError("indices and priorities differ in length");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= items_.size()) throw ContractError("replay index out of range");
    if (!std::isfinite(priorities[i])) throw NumericError("non-finite priority");
    const double p = std::max(priorities[i], min_priority_);
    tree_.set(indices[i], std::pow(p, omega_));
    max_priority_ = std::max(max_priority_, p);
  }
}

double PrioritizedReplay::priority(std::size_t index) const { return std::pow(tree_.get(index), 1.0 / omega_); }

}  // namespace aqt::train
