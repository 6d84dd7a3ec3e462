#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aqt/keyvalue.hpp"
#include "aqt/nn.hpp"

namespace aqt::model {

/// One square convolution: kernel size and stride.
struct ConvSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

std::string format_conv_specs(const std::vector<ConvSpec>& specs);
std::vector<ConvSpec> parse_conv_specs(const std::string& key, const std::string& text);

/// Network hyper-parameters. Defaults reproduce the Atari-scale model: an
/// 84x84x4 input, convs (32, 8x8, s4) -> (64, 4x4, s2) -> (hidden, 3x3, s1),
/// one encoder and one decoder layer with 4 heads and feed-forward width 64,
/// 51 atoms on [-10, 10] and 512-wide noisy branches.
struct AqtConfig {
  std::size_t num_actions = 4;
  std::size_t hidden_dim = 0;  // 0 selects num_actions * 32
  std::size_t head_count = 4;
  std::size_t feedforward_dim = 64;
  std::size_t atoms = 51;
  double v_min = -10.0;
  double v_max = 10.0;
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 1;
  std::size_t input_height = 84;
  std::size_t input_width = 84;
  std::size_t frames_stacked = 4;
  std::vector<ConvSpec> conv = {{8, 4}, {4, 2}, {3, 1}};
  std::vector<std::size_t> conv_channels = {32, 64};  // all but the last conv
  std::size_t branch_hidden = 512;
  double noisy_sigma = 0.1;

  std::size_t model_dim() const { return hidden_dim == 0 ? num_actions * 32 : hidden_dim; }
  /// Feature-map (rows, cols) after the conv chain.
  std::pair<std::size_t, std::size_t> feature_grid() const;
  std::size_t token_count() const;
  void validate() const;

  KeyValues to_key_values() const;
  static AqtConfig from_key_values(const KeyValues& entries);
  bool operator==(const AqtConfig&) const = default;
};

/// Fixed categorical support z_i = v_min + i * delta.
template <typename T>
struct Support {
  Support() = default;
  Support(std::size_t atoms, double v_min, double v_max);

  std::size_t atoms = 0;
  double v_min = 0;
  double v_max = 0;
  double delta = 0;
  std::vector<T> z;
};

/// Per-action categorical distribution head, pre-softmax.
template <typename T>
struct HeadOutput {
  BasicTensor<T> logits;            // [B, A, atoms], dueling-combined
  BasicTensor<T> value_logits;      // [B, atoms]
  BasicTensor<T> advantage_logits;  // [B, A, atoms]
};

/// Encoder self-attention and per-action decoder cross-attention for one frame.
template <typename T>
struct AttentionRecord {
  BasicTensor<T> encoder_self;   // [layers, heads, L, L]
  BasicTensor<T> decoder_cross;  // [layers, heads, A, L]
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
};

/// Everything one forward pass produces for a single observation.
template <typename T>
struct QOutput {
  BasicTensor<T> dist;      // [A, atoms]
  BasicTensor<T> q_values;  // [A]
  T state_value = 0;
  AttentionRecord<T> attention;

  int greedy_action() const;
};

/// Per-atom dueling combination:
///   logits[b, a, i] = v[b, i] + adv[b, a, i] - mean_a' adv[b, a', i]
template <typename T>
BasicTensor<T> dueling_logits(const BasicTensor<T>& value_logits, const BasicTensor<T>& advantage_logits);

/// Scalar expectations sum_i z_i p_i for dist [..., atoms].
template <typename T>
BasicTensor<T> expected_values(const BasicTensor<T>& dist, const Support<T>& support);

/// Single-state dueling aggregation: v_logits [atoms], adv_logits [A, atoms].
template <typename T>
QOutput<T> aggregate_q(const BasicTensor<T>& value_logits, const BasicTensor<T>& advantage_logits,
                       const Support<T>& support);

/// Index of the largest value; ties go to the lowest index.
template <typename T>
int argmax(std::span<const T> values);

/// Common surface of every Q-network the trainer can drive.
template <typename T>
class QNetwork {
 public:
  virtual ~QNetwork() = default;

  virtual std::string kind() const = 0;
  virtual const AqtConfig& config() const = 0;
  virtual const Support<T>& support() const = 0;
  std::size_t num_actions() const { return config().num_actions; }

  /// obs [B, frames, H, W].
  virtual HeadOutput<T> forward(const BasicTensor<T>& obs, nn::Mode mode) = 0;
  virtual nn::ParameterList<T> parameters() const = 0;
  virtual std::vector<nn::NoisyLinear<T>*> noisy_layers() = 0;
  virtual std::unique_ptr<QNetwork<T>> clone() const = 0;

  void resample_noise(nn::Rng& rng);
  void zero_noise();
  /// Copies parameters and current noise from `other` (same architecture).
  void load_state_from(QNetwork<T>& other);
};

/// The action Q-transformer: conv feature extractor, positional encoding,
/// transformer encoder (value branch) and a decoder whose queries are
/// learnable per-action embeddings (advantage branch).
template <typename T>
class AqtNetwork final : public QNetwork<T> {
 public:
  AqtNetwork(AqtConfig config, nn::Rng& rng);

  std::string kind() const override { return "aqt"; }
  const AqtConfig& config() const override { return config_; }
  const Support<T>& support() const override { return support_; }

  /// obs [B, frames, H, W] or [frames, H, W] -> tokens [B, L, D] with
  /// positional encoding added.
  BasicTensor<T> feature_extract(const BasicTensor<T>& obs) const;
  /// Action queries [A, D]: row a is the query branch applied to one_hot(a).
  BasicTensor<T> query_branch() const;
  BasicTensor<T> encode(const BasicTensor<T>& tokens);
  /// queries [A, D] or [B, A, D]; memory [B, L, D] -> [B, A, D].
  BasicTensor<T> decode(const BasicTensor<T>& queries, const BasicTensor<T>& memory);
  BasicTensor<T> value_branch(const BasicTensor<T>& encoded, nn::Mode mode) const;
  BasicTensor<T> advantage_branch(const BasicTensor<T>& decoded, nn::Mode mode) const;

  HeadOutput<T> forward(const BasicTensor<T>& obs, nn::Mode mode) override;
  /// Attention captured by the last forward, for one batch row.
  AttentionRecord<T> attention(std::size_t batch_index = 0) const;
  /// Forward on one observation [frames, H, W] with attention capture.
  QOutput<T> evaluate(const BasicTensor<T>& obs, nn::Mode mode);

  nn::ParameterList<T> parameters() const override;
  std::vector<nn::NoisyLinear<T>*> noisy_layers() override;
  std::unique_ptr<QNetwork<T>> clone() const override;

  std::vector<nn::Conv2d<T>>& convs() { return convs_; }
  nn::Linear<T>& query_layer() { return query_; }
  std::vector<nn::EncoderLayer<T>>& encoder_layers() { return encoder_; }
  std::vector<nn::DecoderLayer<T>>& decoder_layers() { return decoder_; }
  const nn::PositionalEncoding<T>& positional_encoding() const { return pe_; }

 private:
  AqtConfig config_;
  Support<T> support_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::PositionalEncoding<T> pe_;
  std::vector<nn::EncoderLayer<T>> encoder_;
  nn::Linear<T> query_;
  std::vector<nn::DecoderLayer<T>> decoder_;
  nn::NoisyLinear<T> value_hidden_;
  nn::NoisyLinear<T> value_out_;
  nn::NoisyLinear<T> advantage_hidden_;
  nn::NoisyLinear<T> advantage_out_;
};

/// Convolutional dueling distributional baseline: convs (32, 64, 64) with the
/// configured kernels, then noisy value and advantage branches over the
/// flattened feature map. Serves as the frozen teacher for TTQ.
template <typename T>
class RainbowNetwork final : public QNetwork<T> {
 public:
  static constexpr std::size_t kLastChannels = 64;

  RainbowNetwork(AqtConfig config, nn::Rng& rng);

  std::string kind() const override { return "rainbow"; }
  const AqtConfig& config() const override { return config_; }
  const Support<T>& support() const override { return support_; }

  HeadOutput<T> forward(const BasicTensor<T>& obs, nn::Mode mode) override;
  nn::ParameterList<T> parameters() const override;
  std::vector<nn::NoisyLinear<T>*> noisy_layers() override;
  std::unique_ptr<QNetwork<T>> clone() const override;

  std::size_t flat_features() const;
  const nn::NoisyLinear<T>& value_hidden() const { return value_hidden_; }
  const nn::NoisyLinear<T>& value_out() const { return value_out_; }
  const nn::NoisyLinear<T>& advantage_hidden() const { return advantage_hidden_; }
  const nn::NoisyLinear<T>& advantage_out() const { return advantage_out_; }

 private:
  AqtConfig config_;
  Support<T> support_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::NoisyLinear<T> value_hidden_;
  nn::NoisyLinear<T> value_out_;
  nn::NoisyLinear<T> advantage_hidden_;
  nn::NoisyLinear<T> advantage_out_;
};

/// Softmaxed distributions [B, A, atoms] and their expectations [B, A].
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> distributions_and_q(const HeadOutput<T>& head, const Support<T>& support);

template <typename T>
std::unique_ptr<QNetwork<T>> make_network(const std::string& kind, const AqtConfig& config, nn::Rng& rng);

}  // namespace aqt::model
