#include <algorithm>
#include <cmath>
#include <sstream>

#include "aqt/train.hpp"

namespace aqt::train {

template <typename T>
std::vector<T> project_distribution(std::span<const T> next_dist, double reward, double discount, bool done,
                                    const model::Support<T>& support) {
  if (next_dist.size() != support.atoms) throw DimensionError("distribution does not match the support");
  std::vector<double> mass(support.atoms, 0.0);
  const double last = static_cast<double>(support.atoms - 1);
  for (std::size_t j = 0; j < support.atoms; ++j) {
    const double z = support.v_min + static_cast<double>(j) * support.delta;
    const double shifted = std::clamp(reward + (done ? 0.0 : discount * z), support.v_min, support.v_max);
    double b = std::clamp((shifted - support.v_min) / support.delta, 0.0, last);
    const double nearest = std::round(b);
    if (std::abs(b - nearest) < 1e-9) b = nearest;
    const auto l = static_cast<std::size_t>(std::floor(b));
    const auto u = static_cast<std::size_t>(std::ceil(b));
    const double p = static_cast<double>(next_dist[j]);
    if (l == u) {
      mass[l] += p;
    } else {
      mass[l] += p * (static_cast<double>(u) - b);
      mass[u] += p * (b - static_cast<double>(l));
    }
  }
  return std::vector<T>(mass.begin(), mass.end());
}

template <typename T>
BasicTensor<T> categorical_targets(model::QNetwork<T>& online, model::QNetwork<T>& target,
                                   const BasicTensor<T>& next_obs, std::span<const double> rewards,
                                   std::span<const double> discounts, std::span<const std::uint8_t> dones) {
  NoGradGuard no_grad;
  const std::size_t batch = next_obs.shape()[0];
  if (rewards.size() != batch || discounts.size() != batch || dones.size() != batch) {
    throw DimensionError("target inputs must have one entry per batch row");
  }
  const auto& support = target.support();
  const std::size_t actions = online.num_actions();
  const auto [online_dist, online_q] = model::distributions_and_q(online.forward(next_obs, nn::Mode::Train),
                                                                   online.support());
  const auto target_dist = softmax(target.forward(next_obs, nn::Mode::Train).logits);
  std::vector<T> out;
  out.reserve(batch * support.atoms);
  for (std::size_t b = 0; b < batch; ++b) {
    const int best = model::argmax<T>(online_q.data().subspan(b * actions, actions));
    const auto row =
        target_dist.data().subspan((b * actions + static_cast<std::size_t>(best)) * support.atoms, support.atoms);
    const auto projected = project_distribution<T>(row, rewards[b], discounts[b], dones[b], support);
    out.insert(out.end(), projected.begin(), projected.end());
  }
  return BasicTensor<T>({batch, support.atoms}, std::move(out));
}

template <typename T>
LossOutput<T> rainbow_loss(const BasicTensor<T>& logits, std::span<const int> actions,
                           const BasicTensor<T>& target_dists, std::span<const double> weights) {
  const std::size_t batch = logits.shape()[0];
  if (logits.dim() != 3 || actions.size() != batch || weights.size() != batch ||
      target_dists.shape() != Shape{batch, logits.shape()[2]}) {
    throw DimensionError("rainbow_loss: logits [B, A, atoms], targets [B, atoms], one action and weight per row");
  }
  const auto log_p = log_softmax(select_rows(logits, actions));
  const auto cross_entropy = scale(sum_axis(mul(log_p, target_dists), 1), T(-1));
  const BasicTensor<T> w({batch}, std::vector<T>(weights.begin(), weights.end()));
  LossOutput<T> out;
  out.loss = mean(mul(cross_entropy, w));
  out.per_sample.assign(cross_entropy.data().begin(), cross_entropy.data().end());
  return out;
}

template <typename T>
BasicTensor<T> ttq_loss(const BasicTensor<T>& q_aqt, std::span<const int> actions, std::span<const double> q_base) {
  if (q_aqt.dim() != 2 || actions.size() != q_aqt.shape()[0] || q_base.size() != actions.size()) {
    throw DimensionError("ttq_loss: q_aqt [B, A] with one action and baseline value per row");
  }
  for (const int a : actions) {
    if (a < 0 || static_cast<std::size_t>(a) >= q_aqt.shape()[1]) throw ContractError("ttq_loss: action out of range");
  }
  const BasicTensor<T> base({q_base.size()}, std::vector<T>(q_base.begin(), q_base.end()));
  return mean(square(sub(base, select_rows(q_aqt, actions))));
}

TtqSchedule TtqSchedule::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream stream(text);
  std::string item;
  while (std::getline(stream, item, ':')) parts.push_back(item);
  TtqSchedule s;
  if (!parts.empty() && parts[0] == "linear_decay" && (parts.size() == 1 || parts.size() == 3)) {
    s.pattern = AlphaPattern::LinearDecay;
    if (parts.size() == 3) {
      s.alpha_0 = parse_double("alpha_schedule", parts[1]);
      s.decay_steps = parse_u64("alpha_schedule", parts[2]);
    }
  } else if (parts.size() == 2 && parts[0] == "fixed") {
    s.pattern = AlphaPattern::Fixed;
    s.fixed_value = parse_double("alpha_schedule", parts[1]);
  } else {
    throw ConfigError("alpha schedule must be linear_decay, linear_decay:<alpha_0>:<steps> or fixed:<value>, got '" +
                      text + "'");
  }
  if (s.alpha_0 < 0 || s.alpha_0 > 1 || s.fixed_value < 0 || s.fixed_value > 1) {
    throw ConfigError("alpha values must lie in [0, 1]");
  }
  if (s.pattern == AlphaPattern::LinearDecay && s.decay_steps == 0) throw ConfigError("decay steps must be >= 1");
  return s;
}

std::string TtqSchedule::to_string() const {
  if (pattern == AlphaPattern::Fixed) return "fixed:" + format_double(fixed_value);
  return "linear_decay:" + format_double(alpha_0) + ":" + std::to_string(decay_steps);
}

double alpha_schedule(const TtqSchedule& schedule, std::uint64_t step) {
  if (schedule.pattern == AlphaPattern::Fixed) return schedule.fixed_value;
  if (step >= schedule.decay_steps) return 0.0;
  const double progress = static_cast<double>(step) / static_cast<double>(schedule.decay_steps);
  return std::max(0.0, schedule.alpha_0 * (1.0 - progress));
}

std::vector<TtqSchedule> alpha_patterns(std::uint64_t decay_steps) {
  std::vector<TtqSchedule> out;
  out.push_back({AlphaPattern::LinearDecay, 1.0, decay_steps, 0.0});
  for (const double v : {0.2, 0.4, 0.6, 0.8, 1.0}) out.push_back({AlphaPattern::Fixed, 1.0, decay_steps, v});
  return out;
}

template <typename T>
Adam<T>::Adam(nn::ParameterList<T> params, double lr, double epsilon, double beta1, double beta2)
    : params_(std::move(params)), lr_(lr), epsilon_(epsilon), beta1_(beta1), beta2_(beta2) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto values = p.data_mut();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon_);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
}

template <typename T>
double clip_grad_norm(const nn::ParameterList<T>& params, double max_norm) {
  double total = 0;
  for (const auto& [name, p] : params) {
    for (const T g : p.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0 && norm > max_norm) {
    const auto factor = static_cast<T>(max_norm / norm);
    for (const auto& [name, p] : params) {
      auto handle = p;
      for (T& g : handle.grad_mut()) g *= factor;
    }
  }
  return norm;
}

#define AQT_INSTANTIATE_TRAIN(T)                                                                               \
  template std::vector<T> project_distribution<T>(std::span<const T>, double, double, bool,                   \
                                                  const model::Support<T>&);                                  \
  template BasicTensor<T> categorical_targets<T>(model::QNetwork<T>&, model::QNetwork<T>&, const BasicTensor<T>&, \
                                                 std::span<const double>, std::span<const double>,            \
                                                 std::span<const std::uint8_t>);                                      \
  template LossOutput<T> rainbow_loss<T>(const BasicTensor<T>&, std::span<const int>, const BasicTensor<T>&,   \
                                         std::span<const double>);                                            \
  template BasicTensor<T> ttq_loss<T>(const BasicTensor<T>&, std::span<const int>, std::span<const double>);   \
  template class Adam<T>;                                                                                      \
  template double clip_grad_norm<T>(const nn::ParameterList<T>&, double);

AQT_INSTANTIATE_TRAIN(float)
AQT_INSTANTIATE_TRAIN(double)

#undef AQT_INSTANTIATE_TRAIN

}  // namespace aqt::train
