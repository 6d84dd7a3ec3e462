#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aqt/keyvalue.hpp"
#include "aqt/tensor.hpp"

namespace aqt::env {

using Rng = std::mt19937_64;

/// Raw interleaved frame, rows x cols x channels (1 = grey, 3 = RGB).
struct RawFrame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;
};

/// Preprocessed grey frame stored as bytes; value / 255 is the network input.
struct Frame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};
using FramePtr = std::shared_ptr<const Frame>;

/// Stack of the most recent frames, oldest first. Frames are shared between
/// consecutive observations, so replay memory holds each frame once.
struct Observation {
  std::vector<FramePtr> frames;

  std::size_t depth() const { return frames.size(); }
  std::size_t height() const { return frames.empty() ? 0 : frames.front()->height; }
  std::size_t width() const { return frames.empty() ? 0 : frames.front()->width; }
  /// Writes depth * height * width values in [0, 1].
  template <typename T>
  void write_to(T* out) const;
  template <typename T>
  BasicTensor<T> to_tensor() const;  // [depth, H, W]
};

/// Observations [B, depth, H, W].
template <typename T>
BasicTensor<T> batch_tensor(std::span<const Observation* const> observations);

/// Grey conversion (luminance 0.299 R + 0.587 G + 0.114 B for RGB), area
/// resampling to target_height x target_width, scaling to [0, 1].
std::vector<float> preprocess(const RawFrame& frame, std::size_t target_height, std::size_t target_width);

/// Rounds [0, 1] values to bytes.
Frame quantize(const std::vector<float>& values, std::size_t height, std::size_t width);

struct TickResult {
  double reward = 0;
  bool done = false;
};

/// A logical game advanced one tick at a time.
class Game {
 public:
  virtual ~Game() = default;
  virtual std::string name() const = 0;
  virtual const std::vector<std::string>& action_names() const = 0;
  std::size_t num_actions() const { return action_names().size(); }
  virtual void reset(Rng& rng) = 0;
  virtual TickResult tick(int action) = 0;
  virtual RawFrame render() const = 0;
  virtual std::unique_ptr<Game> clone() const = 0;
};

/// Catch on a square grid: a ball falls one row per tick from a random
/// column in row 0; a 3-wide paddle on the bottom row moves one column per
/// tick. When the ball reaches the bottom row the episode ends with +1 if
/// the paddle covers the ball column and -1 otherwise.
/// Actions: 0 Noop, 1 Left, 2 Right.
class CatchGame final : public Game {
 public:
  explicit CatchGame(std::size_t grid = 10, std::size_t cell_pixels = 4);

  std::string name() const override { return "catch"; }
  const std::vector<std::string>& action_names() const override;
  void reset(Rng& rng) override;
  TickResult tick(int action) override;
  RawFrame render() const override;
  std::unique_ptr<Game> clone() const override { return std::make_unique<CatchGame>(*this); }

  /// Places ball and paddle directly; used by tests and oracles.
  void set_state(std::size_t ball_row, std::size_t ball_col, std::size_t paddle_center);
  std::size_t grid() const { return grid_; }
  std::size_t ball_row() const { return ball_row_; }
  std::size_t ball_col() const { return ball_col_; }
  std::size_t paddle_center() const { return paddle_; }

  static constexpr std::uint8_t kBallValue = 255;
  static constexpr std::uint8_t kPaddleValue = 128;

 private:
  std::size_t grid_;
  std::size_t cell_;
  std::size_t ball_row_ = 0;
  std::size_t ball_col_ = 0;
  std::size_t paddle_ = 0;
  bool done_ = false;
};

/// Catch with a fruit and a rock falling side by side. Catching the fruit
/// gives +1, missing it -1, and letting the rock land on the paddle -1.
/// Fire actions destroy the rock while it is above the paddle's columns.
/// Actions: 0 Noop, 1 Left, 2 Right, 3 LeftFire, 4 RightFire.
class TwoTargetCatch final : public Game {
 public:
  explicit TwoTargetCatch(std::size_t grid = 10, std::size_t cell_pixels = 4);

  std::string name() const override { return "catch2"; }
  const std::vector<std::string>& action_names() const override;
  void reset(Rng& rng) override;
  TickResult tick(int action) override;
  RawFrame render() const override;
  std::unique_ptr<Game> clone() const override { return std::make_unique<TwoTargetCatch>(*this); }

  std::size_t fruit_col() const { return fruit_col_; }
  std::size_t rock_col() const { return rock_col_; }
  bool rock_alive() const { return rock_alive_; }
  std::size_t paddle_center() const { return paddle_; }
  std::size_t row() const { return row_; }

  static constexpr std::uint8_t kFruitValue = 255;
  static constexpr std::uint8_t kRockValue = 200;
  static constexpr std::uint8_t kPaddleValue = 128;

 private:
  std::size_t grid_;
  std::size_t cell_;
  std::size_t row_ = 0;
  std::size_t fruit_col_ = 0;
  std::size_t rock_col_ = 0;
  bool rock_alive_ = true;
  std::size_t paddle_ = 0;
  bool done_ = false;
};

struct EnvConfig {
  std::string game = "catch";
  std::size_t grid = 10;
  std::size_t cell_pixels = 4;
  std::size_t observation_height = 40;
  std::size_t observation_width = 40;
  std::size_t frame_stack = 4;
  std::size_t action_repeat = 4;
  std::size_t max_episode_steps = 1000;
  bool clip_rewards = true;

  void validate() const;
  KeyValues to_key_values() const;
  /// Reads only keys with the "env." prefix stripped; unknown keys throw.
  static EnvConfig from_key_values(const KeyValues& entries);
};

std::unique_ptr<Game> make_game(const EnvConfig& config);

struct StepResult {
  Observation observation;
  double reward = 0;  // summed over the repeated ticks, clipped if enabled
  bool done = false;
  bool truncated = false;  // done because the step cap was hit
};

/// Preprocessing wrapper: action repetition, reward clipping, grey
/// resampling, frame stacking and the episode step cap.
class ToyEnv {
 public:
  ToyEnv(EnvConfig config, std::uint64_t seed);

  Observation reset();
  StepResult step(int action);

  std::size_t num_actions() const { return game_->num_actions(); }
  const std::vector<std::string>& action_names() const { return game_->action_names(); }
  const EnvConfig& config() const { return config_; }
  const Game& game() const { return *game_; }
  Game& game() { return *game_; }
  std::size_t episode_steps() const { return steps_; }
  std::size_t episode_index() const { return episode_; }
  /// Most recent preprocessed frame.
  const FramePtr& last_frame() const { return stack_.frames.back(); }

  /// When set, every observation is written as <dir>/episode_<e>/obs_<t>.tensor.
  void set_dump_directory(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

 private:
  FramePtr capture() const;
  void dump(const Observation& obs) const;

  EnvConfig config_;
  std::unique_ptr<Game> game_;
  Rng rng_;
  Observation stack_;
  std::size_t steps_ = 0;
  std::size_t episode_ = 0;
  bool done_ = true;
  std::filesystem::path dump_dir_;
};

/// Loads a dumped episode's observation stacks in step order.
std::vector<Tensor> load_dumped_episode(const std::filesystem::path& episode_dir);

}  // namespace aqt::env
