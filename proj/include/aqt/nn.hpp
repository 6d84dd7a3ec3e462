#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aqt/ops.hpp"
#include "aqt/tensor.hpp"

namespace aqt::nn {

using Rng = std::mt19937_64;

/// Noisy layers sample their factorized noise in Train mode and use the
/// mean weights only in Eval mode.
enum class Mode { Train, Eval };

template <typename T>
using NamedParameter = std::pair<std::string, BasicTensor<T>>;
template <typename T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Leaf tensor with entries drawn from U(-bound, bound).
template <typename T>
BasicTensor<T> uniform_parameter(Shape shape, double bound, Rng& rng);

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return linear(x, weight, bias); }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }

  BasicTensor<T> weight;  // [out, in]
  BasicTensor<T> bias;    // [out]
};

/// Linear layer with learnable factorized Gaussian noise:
///   y = (W_mu + W_sigma * (eps_out eps_in^T)) x + b_mu + b_sigma * eps_out
/// where eps = sign(u) sqrt(|u|), u ~ N(0, 1).
template <typename T>
class NoisyLinear {
 public:
  NoisyLinear() = default;
  NoisyLinear(std::size_t in_features, std::size_t out_features, double initial_sigma, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) const;
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  void resample_noise(Rng& rng);
  void zero_noise();
  void set_noise(std::vector<T> noise_in, std::vector<T> noise_out);
  std::span<const T> noise_in() const { return noise_in_; }
  std::span<const T> noise_out() const { return noise_out_; }

  std::size_t in_features() const { return weight_mu.shape()[1]; }
  std::size_t out_features() const { return weight_mu.shape()[0]; }

  BasicTensor<T> weight_mu;
  BasicTensor<T> weight_sigma;
  BasicTensor<T> bias_mu;
  BasicTensor<T> bias_sigma;

 private:
  std::vector<T> noise_in_;
  std::vector<T> noise_out_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return layer_norm(x, gain, bias); }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  BasicTensor<T> gain;
  BasicTensor<T> bias;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, std::size_t stride, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return conv2d(x, kernel, bias, stride); }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  BasicTensor<T> kernel;  // [O, C, k, k]
  BasicTensor<T> bias;    // [O]
  std::size_t stride = 1;
};

/// Multi-head scaled dot-product attention. Scores are scaled by
/// 1/sqrt(model_dim / head_count) and the post-softmax weights of the last
/// call are kept in last_attention() as [batch, heads, Lq, Lk].
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t head_count, Rng& rng);

  /// queries [B, Lq, D] (or [Lq, D]), keys_values [B, Lk, D] (or [Lk, D]).
  BasicTensor<T> forward(const BasicTensor<T>& queries, const BasicTensor<T>& keys_values);
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  /// Identity projections with zero biases; used to check the attention core.
  void set_identity_projections();

  const BasicTensor<T>& last_attention() const { return last_attention_; }
  std::size_t head_count() const { return head_count_; }
  std::size_t model_dim() const { return model_dim_; }
  std::size_t head_dim() const { return model_dim_ / head_count_; }

  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
  Linear<T> output;

 private:
  std::size_t model_dim_ = 0;
  std::size_t head_count_ = 1;
  BasicTensor<T> last_attention_;
};

template <typename T>
BasicTensor<T> cross_attention(MultiHeadAttention<T>& mha, const BasicTensor<T>& queries,
                               const BasicTensor<T>& keys_values) {
  return mha.forward(queries, keys_values);
}

template <typename T>
BasicTensor<T> self_attention(MultiHeadAttention<T>& mha, const BasicTensor<T>& tokens) {
  return mha.forward(tokens, tokens);
}

/// Position-wise feed-forward block: Linear -> ReLU -> Linear.
template <typename T>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t model_dim, std::size_t hidden_dim, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return contract.forward(relu(expand.forward(x))); }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  Linear<T> expand;
  Linear<T> contract;
};

/// Fixed 2-D sinusoidal encoding over a patch grid. The first half of the
/// channels encodes the row, the second half the column.
template <typename T>
class PositionalEncoding {
 public:
  PositionalEncoding() = default;
  PositionalEncoding(std::size_t grid_height, std::size_t grid_width, std::size_t model_dim);

  const BasicTensor<T>& table() const { return table_; }  // [L, D]
  std::size_t grid_height() const { return grid_height_; }
  std::size_t grid_width() const { return grid_width_; }
  std::size_t length() const { return grid_height_ * grid_width_; }

 private:
  std::size_t grid_height_ = 0;
  std::size_t grid_width_ = 0;
  BasicTensor<T> table_;
};

/// tokens [..., L, D] + table [L, D].
template <typename T>
BasicTensor<T> positional_encode(const BasicTensor<T>& tokens, const PositionalEncoding<T>& pe);

/// Post-norm encoder block: self-attention, add & norm, feed-forward, add & norm.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(std::size_t model_dim, std::size_t head_count, std::size_t feedforward_dim, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& tokens);
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  MultiHeadAttention<T> self_attn;
  LayerNorm<T> norm1;
  FeedForward<T> feedforward;
  LayerNorm<T> norm2;
};

/// Post-norm decoder block: query self-attention, add & norm, cross-attention
/// over the encoder output, add & norm, feed-forward, add & norm.
template <typename T>
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(std::size_t model_dim, std::size_t head_count, std::size_t feedforward_dim, Rng& rng);

  BasicTensor<T> forward(const BasicTensor<T>& queries, const BasicTensor<T>& memory);
  void collect(ParameterList<T>& out, const std::string& prefix) const;

  MultiHeadAttention<T> self_attn;
  LayerNorm<T> norm1;
  MultiHeadAttention<T> cross_attn;
  LayerNorm<T> norm2;
  FeedForward<T> feedforward;
  LayerNorm<T> norm3;
};

/// Copies parameter values from `source` into `target` (matched by position and name).
template <typename T>
void copy_parameters(const ParameterList<T>& source, ParameterList<T>& target);

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride);

}  // namespace aqt::nn
