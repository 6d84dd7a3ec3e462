#include "aqt/env.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "aqt/serialize.hpp"

namespace aqt::env {

namespace {

std::size_t clamp_center(long center, std::size_t grid) {
  return static_cast<std::size_t>(std::clamp<long>(center, 1, static_cast<long>(grid) - 2));
}

long paddle_shift(int action) {
  switch (action) {
    case 1:
    case 3:
      return -1;
    case 2:
    case 4:
      return 1;
    default:
      return 0;
  }
}

bool covers(std::size_t center, std::size_t col) {
  return (center > col ? center - col : col - center) <= 1;
}

void check_action(int action, std::size_t count) {
  if (action < 0 || static_cast<std::size_t>(action) >= count) {
    throw ContractError("action " + std::to_string(action) + " outside [0, " + std::to_string(count) + ")");
  }
}

void fill_cell(RawFrame& frame, std::size_t cell, std::size_t row, std::size_t col, std::uint8_t value) {
  for (std::size_t y = row * cell; y < (row + 1) * cell; ++y)
    for (std::size_t x = col * cell; x < (col + 1) * cell; ++x) frame.pixels[y * frame.width + x] = value;
}

RawFrame blank_frame(std::size_t grid, std::size_t cell) {
  RawFrame frame;
  frame.height = frame.width = grid * cell;
  frame.channels = 1;
  frame.pixels.assign(frame.height * frame.width, 0);
  return frame;
}

// Overlap of source pixel [i, i+1) with the interval [lo, hi).
double overlap(std::size_t i, double lo, double hi) {
  return std::max(0.0, std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i)));
}

}  // namespace

template <typename T>
void Observation::write_to(T* out) const {
  for (const auto& frame : frames) {
    for (const auto p : frame->pixels) *out++ = static_cast<T>(p) / static_cast<T>(255);
  }
}

template <typename T>
BasicTensor<T> Observation::to_tensor() const {
  std::vector<T> values(depth() * height() * width());
  write_to(values.data());
  return BasicTensor<T>({depth(), height(), width()}, std::move(values));
}

template <typename T>
BasicTensor<T> batch_tensor(std::span<const Observation* const> observations) {
  if (observations.empty()) throw ContractError("empty observation batch");
  const auto& first = *observations.front();
  const std::size_t per = first.depth() * first.height() * first.width();
  std::vector<T> values(observations.size() * per);
  for (std::size_t b = 0; b < observations.size(); ++b) {
    const auto& obs = *observations[b];
    if (obs.depth() != first.depth() || obs.height() != first.height() || obs.width() != first.width()) {
      throw DimensionError("observations in a batch must share a shape");
    }
    obs.write_to(values.data() + b * per);
  }
  return BasicTensor<T>({observations.size(), first.depth(), first.height(), first.width()}, std::move(values));
}

std::vector<float> preprocess(const RawFrame& frame, std::size_t target_height, std::size_t target_width) {
  if (frame.channels != 1 && frame.channels != 3) throw DimensionError("frames must have 1 or 3 channels");
  if (frame.pixels.size() != frame.height * frame.width * frame.channels || frame.height == 0 || frame.width == 0) {
    throw DimensionError("frame pixel buffer does not match its size");
  }
  if (target_height == 0 || target_width == 0) throw DimensionError("target size must be positive");
  std::vector<double> grey(frame.height * frame.width);
  for (std::size_t i = 0; i < grey.size(); ++i) {
    const auto* p = frame.pixels.data() + i * frame.channels;
    grey[i] = frame.channels == 1 ? p[0] : 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  const double sy = static_cast<double>(frame.height) / static_cast<double>(target_height);
  const double sx = static_cast<double>(frame.width) / static_cast<double>(target_width);
  std::vector<float> out(target_height * target_width);
  for (std::size_t oy = 0; oy < target_height; ++oy) {
    const double y0 = static_cast<double>(oy) * sy;
    const double y1 = y0 + sy;
    const auto ylo = static_cast<std::size_t>(std::floor(y0));
    const auto yhi = std::min(frame.height, static_cast<std::size_t>(std::ceil(y1)));
    for (std::size_t ox = 0; ox < target_width; ++ox) {
      const double x0 = static_cast<double>(ox) * sx;
      const double x1 = x0 + sx;
      const auto xlo = static_cast<std::size_t>(std::floor(x0));
      const auto xhi = std::min(frame.width, static_cast<std::size_t>(std::ceil(x1)));
      double acc = 0;
      for (std::size_t y = ylo; y < yhi; ++y) {
        const double wy = overlap(y, y0, y1);
        for (std::size_t x = xlo; x < xhi; ++x) acc += wy * overlap(x, x0, x1) * grey[y * frame.width + x];
      }
      out[oy * target_width + ox] = static_cast<float>(acc / (sy * sx) / 255.0);
    }
  }
  return out;
}

Frame quantize(const std::vector<float>& values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw DimensionError("quantize: size mismatch");
  Frame frame{height, width, std::vector<std::uint8_t>(values.size())};
  for (std::size_t i = 0; i < values.size(); ++i) {
    frame.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 255.0f));
  }
  return frame;
}

CatchGame::CatchGame(std::size_t grid, std::size_t cell_pixels) : grid_(grid), cell_(cell_pixels) {
  if (grid < 4) throw ContractError("catch grid must be at least 4");
  paddle_ = grid_ / 2;
}

const std::vector<std::string>& CatchGame::action_names() const {
  static const std::vector<std::string> names{"Noop", "Left", "Right"};
  return names;
}

void CatchGame::reset(Rng& rng) {
  std::uniform_int_distribution<std::size_t> col(0, grid_ - 1);
  ball_row_ = 0;
  ball_col_ = col(rng);
  paddle_ = grid_ / 2;
  done_ = false;
}

void CatchGame::set_state(std::size_t ball_row, std::size_t ball_col, std::size_t paddle_center) {
  if (ball_row >= grid_ - 1 || ball_col >= grid_ || paddle_center < 1 || paddle_center > grid_ - 2) {
    throw ContractError("catch state out of range");
  }
  ball_row_ = ball_row;
  ball_col_ = ball_col;
  paddle_ = paddle_center;
  done_ = false;
}

TickResult CatchGame::tick(int action) {
  if (done_) throw ContractError("catch: tick after the episode ended");
  check_action(action, 3);
  paddle_ = clamp_center(static_cast<long>(paddle_) + paddle_shift(action), grid_);
  ++ball_row_;
  TickResult result;
  if (ball_row_ == grid_ - 1) {
    done_ = result.done = true;
    result.reward = covers(paddle_, ball_col_) ? 1.0 : -1.0;
  }
  return result;
}

RawFrame CatchGame::render() const {
  auto frame = blank_frame(grid_, cell_);
  for (std::size_t c = paddle_ - 1; c <= paddle_ + 1; ++c) fill_cell(frame, cell_, grid_ - 1, c, kPaddleValue);
  fill_cell(frame, cell_, ball_row_, ball_col_, kBallValue);
  return frame;
}

TwoTargetCatch::TwoTargetCatch(std::size_t grid, std::size_t cell_pixels) : grid_(grid), cell_(cell_pixels) {
  if (grid < 4) throw ContractError("catch grid must be at least 4");
  paddle_ = grid_ / 2;
}

const std::vector<std::string>& TwoTargetCatch::action_names() const {
  static const std::vector<std::string> names{"Noop", "Left", "Right", "LeftFire", "RightFire"};
  return names;
}

void TwoTargetCatch::reset(Rng& rng) {
  std::uniform_int_distribution<std::size_t> col(0, grid_ - 1);
  std::uniform_int_distribution<std::size_t> other(0, grid_ - 2);
  row_ = 0;
  fruit_col_ = col(rng);
  rock_col_ = other(rng);
  if (rock_col_ >= fruit_col_) ++rock_col_;
  rock_alive_ = true;
  paddle_ = grid_ / 2;
  done_ = false;
}

TickResult TwoTargetCatch::tick(int action) {
  if (done_) throw ContractError("catch2: tick after the episode ended");
  check_action(action, 5);
  paddle_ = clamp_center(static_cast<long>(paddle_) + paddle_shift(action), grid_);
  if (action >= 3 && rock_alive_ && covers(paddle_, rock_col_)) rock_alive_ = false;
  ++row_;
  TickResult result;
  if (row_ == grid_ - 1) {
    done_ = result.done = true;
    result.reward = covers(paddle_, fruit_col_) ? 1.0 : -1.0;
    if (rock_alive_ && covers(paddle_, rock_col_)) result.reward -= 1.0;
  }
  return result;
}

RawFrame TwoTargetCatch::render() const {
  auto frame = blank_frame(grid_, cell_);
  for (std::size_t c = paddle_ - 1; c <= paddle_ + 1; ++c) fill_cell(frame, cell_, grid_ - 1, c, kPaddleValue);
  if (rock_alive_) fill_cell(frame, cell_, row_, rock_col_, kRockValue);
  fill_cell(frame, cell_, row_, fruit_col_, kFruitValue);
  return frame;
}

void EnvConfig::validate() const {
  if (game != "catch" && game != "catch2") throw ConfigError("env.game must be catch or catch2, got '" + game + "'");
  if (grid < 4) throw ConfigError("env.grid must be >= 4");
  if (cell_pixels == 0 || observation_height == 0 || observation_width == 0) {
    throw ConfigError("env pixel sizes must be positive");
  }
  if (frame_stack == 0 || action_repeat == 0 || max_episode_steps == 0) {
    throw ConfigError("env.frame_stack, env.action_repeat and env.max_episode_steps must be >= 1");
  }
}

KeyValues EnvConfig::to_key_values() const {
  return {
      {"game", game},
      {"grid", std::to_string(grid)},
      {"cell_pixels", std::to_string(cell_pixels)},
      {"observation_height", std::to_string(observation_height)},
      {"observation_width", std::to_string(observation_width)},
      {"frame_stack", std::to_string(frame_stack)},
      {"action_repeat", std::to_string(action_repeat)},
      {"max_episode_steps", std::to_string(max_episode_steps)},
      {"clip_rewards", clip_rewards ? "true" : "false"},
  };
}

EnvConfig EnvConfig::from_key_values(const KeyValues& entries) {
  EnvConfig c;
  for (const auto& [key, value] : entries) {
    if (key == "game") c.game = value;
    else if (key == "grid") c.grid = parse_size(key, value);
    else if (key == "cell_pixels") c.cell_pixels = parse_size(key, value);
    else if (key == "observation_height") c.observation_height = parse_size(key, value);
    else if (key == "observation_width") c.observation_width = parse_size(key, value);
    else if (key == "frame_stack") c.frame_stack = parse_size(key, value);
    else if (key == "action_repeat") c.action_repeat = parse_size(key, value);
    else if (key == "max_episode_steps") c.max_episode_steps = parse_size(key, value);
    else if (key == "clip_rewards") c.clip_rewards = parse_bool(key, value);
    else throw ConfigError("unknown env key '" + key + "'");
  }
  return c;
}

std::unique_ptr<Game> make_game(const EnvConfig& config) {
  if (config.game == "catch") return std::make_unique<CatchGame>(config.grid, config.cell_pixels);
  if (config.game == "catch2") return std::make_unique<TwoTargetCatch>(config.grid, config.cell_pixels);
  throw ConfigError("unknown game '" + config.game + "'");
}

ToyEnv::ToyEnv(EnvConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
  config_.validate();
  game_ = make_game(config_);
}

FramePtr ToyEnv::capture() const {
  const auto values = preprocess(game_->render(), config_.observation_height, config_.observation_width);
  return std::make_shared<const Frame>(quantize(values, config_.observation_height, config_.observation_width));
}

Observation ToyEnv::reset() {
  if (steps_ > 0 || !done_) ++episode_;
  game_->reset(rng_);
  steps_ = 0;
  done_ = false;
  stack_.frames.assign(config_.frame_stack, capture());
  dump(stack_);
  return stack_;
}

StepResult ToyEnv::step(int action) {
  if (done_) throw ContractError("step called on a finished episode; call reset first");
  check_action(action, num_actions());
  StepResult result;
  for (std::size_t t = 0; t < config_.action_repeat; ++t) {
    const auto tick = game_->tick(action);
    result.reward += tick.reward;
    if (tick.done) {
      result.done = true;
      break;
    }
  }
  ++steps_;
  if (config_.clip_rewards) result.reward = std::clamp(result.reward, -1.0, 1.0);
  if (!result.done && steps_ >= config_.max_episode_steps) result.done = result.truncated = true;
  done_ = result.done;
  stack_.frames.erase(stack_.frames.begin());
  stack_.frames.push_back(capture());
  result.observation = stack_;
  dump(stack_);
  return result;
}

void ToyEnv::dump(const Observation& obs) const {
  if (dump_dir_.empty()) return;
  const auto dir = dump_dir_ / ("episode_" + std::to_string(episode_));
  std::filesystem::create_directories(dir);
  save_tensor(dir / ("obs_" + std::to_string(steps_) + ".tensor"), obs.to_tensor<float>());
}

std::vector<Tensor> load_dumped_episode(const std::filesystem::path& episode_dir) {
  if (!std::filesystem::is_directory(episode_dir)) throw IoError("no dumped episode at " + episode_dir.string());
  std::map<std::size_t, std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(episode_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("obs_", 0) != 0 || entry.path().extension() != ".tensor") continue;
    files[std::stoul(name.substr(4))] = entry.path();
  }
  std::vector<Tensor> stacks;
  for (const auto& [index, path] : files) stacks.push_back(load_tensor(path));
  return stacks;
}

template void Observation::write_to<float>(float*) const;
template void Observation::write_to<double>(double*) const;
template Tensor Observation::to_tensor<float>() const;
template TensorD Observation::to_tensor<double>() const;
template Tensor batch_tensor<float>(std::span<const Observation* const>);
template TensorD batch_tensor<double>(std::span<const Observation* const>);

}  // namespace aqt::env
