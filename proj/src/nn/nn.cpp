#include "aqt/nn.hpp"

#include <cmath>

namespace aqt::nn {

namespace {

template <typename T>
BasicTensor<T> unbatched(const BasicTensor<T>& x) {
  return reshape(x, Shape{1, x.shape()[0], x.shape()[1]});
}

template <typename T>
std::vector<T> factorized_noise(std::size_t count, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> noise(count);
  for (auto& v : noise) {
    const double u = normal(rng);
    v = static_cast<T>(std::copysign(std::sqrt(std::abs(u)), u));
  }
  return noise;
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride) {
  if (stride == 0) throw ContractError("stride must be >= 1");
  if (input < kernel) {
    throw DimensionError("input extent " + std::to_string(input) + " smaller than kernel " + std::to_string(kernel));
  }
  return (input - kernel) / stride + 1;
}

template <typename T>
BasicTensor<T> uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_parameter<T>({out_features, in_features}, bound, rng);
  bias = uniform_parameter<T>({out_features}, bound, rng);
}

template <typename T>
void Linear<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
NoisyLinear<T>::NoisyLinear(std::size_t in_features, std::size_t out_features, double initial_sigma, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  const auto sigma = static_cast<T>(initial_sigma / std::sqrt(static_cast<double>(in_features)));
  weight_mu = uniform_parameter<T>({out_features, in_features}, bound, rng);
  weight_sigma = BasicTensor<T>::full({out_features, in_features}, sigma, true);
  bias_mu = uniform_parameter<T>({out_features}, bound, rng);
  bias_sigma = BasicTensor<T>::full({out_features}, sigma, true);
  zero_noise();
}

template <typename T>
BasicTensor<T> NoisyLinear<T>::forward(const BasicTensor<T>& x, Mode mode) const {
  if (mode == Mode::Eval) return linear(x, weight_mu, bias_mu);
  const std::size_t out = out_features();
  const std::size_t in = in_features();
  std::vector<T> outer(out * in);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) outer[o * in + i] = noise_out_[o] * noise_in_[i];
  }
  const BasicTensor<T> weight_noise({out, in}, std::move(outer));
  const BasicTensor<T> bias_noise({out}, noise_out_);
  const auto weight = add(weight_mu, mul(weight_sigma, weight_noise));
  const auto bias = add(bias_mu, mul(bias_sigma, bias_noise));
  return linear(x, weight, bias);
}

template <typename T>
void NoisyLinear<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight_mu", weight_mu);
  out.emplace_back(prefix + ".weight_sigma", weight_sigma);
  out.emplace_back(prefix + ".bias_mu", bias_mu);
  out.emplace_back(prefix + ".bias_sigma", bias_sigma);
}

template <typename T>
void NoisyLinear<T>::resample_noise(Rng& rng) {
  noise_in_ = factorized_noise<T>(in_features(), rng);
  noise_out_ = factorized_noise<T>(out_features(), rng);
}

template <typename T>
void NoisyLinear<T>::zero_noise() {
  noise_in_.assign(in_features(), T(0));
  noise_out_.assign(out_features(), T(0));
}

template <typename T>
void NoisyLinear<T>::set_noise(std::vector<T> noise_in, std::vector<T> noise_out) {
  if (noise_in.size() != in_features() || noise_out.size() != out_features()) {
    throw DimensionError("noise vectors must match layer in/out features");
  }
  noise_in_ = std::move(noise_in);
  noise_out_ = std::move(noise_out);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t width)
    : gain(BasicTensor<T>::full({width}, T(1), true)), bias(BasicTensor<T>::zeros({width}, true)) {}

template <typename T>
void LayerNorm<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gain", gain);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_size, std::size_t stride_,
                  Rng& rng)
    : stride(stride_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel_size * kernel_size));
  kernel = uniform_parameter<T>({out_channels, in_channels, kernel_size, kernel_size}, bound, rng);
  bias = uniform_parameter<T>({out_channels}, bound, rng);
}

template <typename T>
void Conv2d<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".kernel", kernel);
  out.emplace_back(prefix + ".bias", bias);
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(std::size_t model_dim, std::size_t head_count, Rng& rng)
    : model_dim_(model_dim), head_count_(head_count) {
  if (head_count == 0 || model_dim % head_count != 0) {
    throw ContractError("model_dim " + std::to_string(model_dim) + " not divisible by head_count " +
                        std::to_string(head_count));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(2 * model_dim));
  for (auto* proj : {&query, &key, &value, &output}) {
    proj->weight = uniform_parameter<T>({model_dim, model_dim}, bound, rng);
    proj->bias = BasicTensor<T>::zeros({model_dim}, true);
  }
}

template <typename T>
BasicTensor<T> MultiHeadAttention<T>::forward(const BasicTensor<T>& queries, const BasicTensor<T>& keys_values) {
  const bool batched = queries.dim() == 3;
  if (queries.dim() != keys_values.dim() || (queries.dim() != 2 && queries.dim() != 3)) {
    throw DimensionError("attention inputs must both be [L, D] or [B, L, D]");
  }
  const auto q_in = batched ? queries : unbatched(queries);
  const auto kv_in = batched ? keys_values : unbatched(keys_values);
  const std::size_t batch = q_in.shape()[0];
  const std::size_t lq = q_in.shape()[1];
  const std::size_t lk = kv_in.shape()[1];
  if (lq == 0 || lk == 0) throw ContractError("attention needs at least one query and one key");
  if (kv_in.shape()[0] != batch) throw DimensionError("attention batch sizes differ");
  if (q_in.shape()[2] != model_dim_ || kv_in.shape()[2] != model_dim_) {
    throw DimensionError("attention inputs must have width " + std::to_string(model_dim_));
  }
  const std::size_t dh = head_dim();
  auto split_heads = [&](const BasicTensor<T>& x, std::size_t length) {
    return permute(reshape(x, Shape{batch, length, head_count_, dh}), {0, 2, 1, 3});
  };
  const auto q = split_heads(query.forward(q_in), lq);
  const auto k = split_heads(key.forward(kv_in), lk);
  const auto v = split_heads(value.forward(kv_in), lk);
  const auto scores = scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const auto weights = softmax(scores);
  last_attention_ = weights.detach();
  const auto context = reshape(permute(matmul(weights, v), {0, 2, 1, 3}), Shape{batch, lq, model_dim_});
  const auto out = output.forward(context);
  return batched ? out : reshape(out, Shape{lq, model_dim_});
}

template <typename T>
void MultiHeadAttention<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  query.collect(out, prefix + ".query");
  key.collect(out, prefix + ".key");
  value.collect(out, prefix + ".value");
  output.collect(out, prefix + ".output");
}

template <typename T>
void MultiHeadAttention<T>::set_identity_projections() {
  for (auto* proj : {&query, &key, &value, &output}) {
    auto w = proj->weight.data_mut();
    std::fill(w.begin(), w.end(), T(0));
    for (std::size_t i = 0; i < model_dim_; ++i) w[i * model_dim_ + i] = T(1);
    auto b = proj->bias.data_mut();
    std::fill(b.begin(), b.end(), T(0));
  }
}

template <typename T>
FeedForward<T>::FeedForward(std::size_t model_dim, std::size_t hidden_dim, Rng& rng)
    : expand(model_dim, hidden_dim, rng), contract(hidden_dim, model_dim, rng) {}

template <typename T>
void FeedForward<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  expand.collect(out, prefix + ".expand");
  contract.collect(out, prefix + ".contract");
}

template <typename T>
PositionalEncoding<T>::PositionalEncoding(std::size_t grid_height, std::size_t grid_width, std::size_t model_dim)
    : grid_height_(grid_height), grid_width_(grid_width) {
  const std::size_t length = grid_height * grid_width;
  const std::size_t row_channels = model_dim / 2;
  std::vector<T> table(length * model_dim);
  auto encode = [](double position, std::size_t channel, std::size_t width) {
    const double exponent = static_cast<double>(2 * (channel / 2)) / static_cast<double>(width);
    const double angle = position / std::pow(10000.0, exponent);
    return channel % 2 == 0 ? std::sin(angle) : std::cos(angle);
  };
  for (std::size_t y = 0; y < grid_height; ++y) {
    for (std::size_t x = 0; x < grid_width; ++x) {
      T* row = table.data() + (y * grid_width + x) * model_dim;
      for (std::size_t c = 0; c < model_dim; ++c) {
        row[c] = c < row_channels
                     ? static_cast<T>(encode(static_cast<double>(y), c, row_channels))
                     : static_cast<T>(encode(static_cast<double>(x), c - row_channels, model_dim - row_channels));
      }
    }
  }
  table_ = BasicTensor<T>({length, model_dim}, std::move(table));
}

template <typename T>
BasicTensor<T> positional_encode(const BasicTensor<T>& tokens, const PositionalEncoding<T>& pe) {
  const auto& table = pe.table();
  if (tokens.dim() < 2 || tokens.shape()[tokens.dim() - 2] != table.shape()[0] ||
      tokens.shape().back() != table.shape()[1]) {
    throw DimensionError("positional encoding table " + shape_string(table.shape()) + " does not fit tokens " +
                         shape_string(tokens.shape()));
  }
  return add(tokens, table);
}

template <typename T>
EncoderLayer<T>::EncoderLayer(std::size_t model_dim, std::size_t head_count, std::size_t feedforward_dim, Rng& rng)
    : self_attn(model_dim, head_count, rng),
      norm1(model_dim),
      feedforward(model_dim, feedforward_dim, rng),
      norm2(model_dim) {}

template <typename T>
BasicTensor<T> EncoderLayer<T>::forward(const BasicTensor<T>& tokens) {
  const auto attended = norm1.forward(add(tokens, self_attention(self_attn, tokens)));
  return norm2.forward(add(attended, feedforward.forward(attended)));
}

template <typename T>
void EncoderLayer<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  norm1.collect(out, prefix + ".norm1");
  feedforward.collect(out, prefix + ".feedforward");
  norm2.collect(out, prefix + ".norm2");
}

template <typename T>
DecoderLayer<T>::DecoderLayer(std::size_t model_dim, std::size_t head_count, std::size_t feedforward_dim, Rng& rng)
    : self_attn(model_dim, head_count, rng),
      norm1(model_dim),
      cross_attn(model_dim, head_count, rng),
      norm2(model_dim),
      feedforward(model_dim, feedforward_dim, rng),
      norm3(model_dim) {}

template <typename T>
BasicTensor<T> DecoderLayer<T>::forward(const BasicTensor<T>& queries, const BasicTensor<T>& memory) {
  const auto action_queries = norm1.forward(add(queries, self_attention(self_attn, queries)));
  const auto attended = norm2.forward(add(action_queries, cross_attention(cross_attn, action_queries, memory)));
  return norm3.forward(add(attended, feedforward.forward(attended)));
}

template <typename T>
void DecoderLayer<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  norm1.collect(out, prefix + ".norm1");
  cross_attn.collect(out, prefix + ".cross_attn");
  norm2.collect(out, prefix + ".norm2");
  feedforward.collect(out, prefix + ".feedforward");
  norm3.collect(out, prefix + ".norm3");
}

template <typename T>
void copy_parameters(const ParameterList<T>& source, ParameterList<T>& target) {
  if (source.size() != target.size()) throw DimensionError("parameter lists differ in length");
  for (std::size_t i = 0; i < source.size(); ++i) {
    if (source[i].first != target[i].first || source[i].second.shape() != target[i].second.shape()) {
      throw DimensionError("parameter mismatch at " + source[i].first);
    }
    auto dst = target[i].second.data_mut();
    const auto src = source[i].second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

#define AQT_INSTANTIATE_NN(T)                                                                            \
  template BasicTensor<T> uniform_parameter<T>(Shape, double, Rng&);                                    \
  template class Linear<T>;                                                                             \
  template class NoisyLinear<T>;                                                                        \
  template class LayerNorm<T>;                                                                          \
  template class Conv2d<T>;                                                                             \
  template class MultiHeadAttention<T>;                                                                 \
  template class FeedForward<T>;                                                                        \
  template class PositionalEncoding<T>;                                                                 \
  template class EncoderLayer<T>;                                                                       \
  template class DecoderLayer<T>;                                                                       \
  template BasicTensor<T> positional_encode(const BasicTensor<T>&, const PositionalEncoding<T>&);      \
  template void copy_parameters(const ParameterList<T>&, ParameterList<T>&);

AQT_INSTANTIATE_NN(float)
AQT_INSTANTIATE_NN(double)

#undef AQT_INSTANTIATE_NN

}  // namespace aqt::nn
