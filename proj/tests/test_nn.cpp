#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "aqt/nn.hpp"
#include "test_util.hpp"

namespace aqt::nn {
namespace {

using aqt::testing::expect_gradients_match;
using aqt::testing::random_tensor;
using aqt::testing::weighted_sum;

using Matrix = std::vector<std::vector<double>>;

Matrix rows_of(const TensorD& x) {
  const std::size_t cols = x.shape().back();
  Matrix m(x.numel() / cols, std::vector<double>(cols));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = x.data()[i * cols + j];
  return m;
}

// softmax(Q K^T / sqrt(d)) V written out entry by entry.
Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* weights = nullptr) {
  const double d = static_cast<double>(q[0].size());
  Matrix out(q.size(), std::vector<double>(v[0].size(), 0.0));
  if (weights) weights->assign(q.size(), std::vector<double>(k.size()));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> s(k.size());
    double top = -1e300;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(d);
      top = std::max(top, s[j]);
    }
    double z = 0;
    for (auto& e : s) z += (e = std::exp(e - top));
    for (std::size_t j = 0; j < k.size(); ++j) {
      const double w = s[j] / z;
      if (weights) (*weights)[i][j] = w;
      for (std::size_t c = 0; c < v[j].size(); ++c) out[i][c] += w * v[j][c];
    }
  }
  return out;
}

Matrix affine(const Matrix& x, const TensorD& w, const TensorD& b) {
  const std::size_t out_dim = w.shape()[0];
  Matrix y(x.size(), std::vector<double>(out_dim));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b.data()[o];
      for (std::size_t i = 0; i < x[r].size(); ++i) acc += w.at({o, i}) * x[r][i];
      y[r][o] = acc;
    }
  return y;
}

Matrix normalize_rows(const Matrix& x) {
  Matrix y = x;
  for (auto& row : y) {
    double mu = 0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    double var = 0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (double& v : row) v = (v - mu) / std::sqrt(var + 1e-5);
  }
  return y;
}

Matrix plus(const Matrix& a, const Matrix& b) {
  Matrix y = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) y[i][j] += b[i][j];
  return y;
}

TEST(ConvOutputSize, MatchesFloorFormula) {
  EXPECT_EQ(conv_output_size(84, 8, 4), 20u);
  EXPECT_EQ(conv_output_size(20, 4, 2), 9u);
  EXPECT_EQ(conv_output_size(9, 3, 1), 7u);
  EXPECT_THROW(conv_output_size(2, 3, 1), DimensionError);
}

TEST(NoisyLinear, InitialisationRanges) {
  Rng rng(1);
  const NoisyLinear<double> layer(16, 8, 0.1, rng);
  for (double w : layer.weight_mu.data()) EXPECT_LE(std::abs(w), 0.25);
  for (double s : layer.weight_sigma.data()) EXPECT_DOUBLE_EQ(s, 0.1 / 4.0);
  for (double s : layer.bias_sigma.data()) EXPECT_DOUBLE_EQ(s, 0.1 / 4.0);
}

TEST(NoisyLinear, EvalModeUsesMeanWeightsOnly) {
  Rng rng(2);
  NoisyLinear<double> layer(3, 2, 0.5, rng);
  layer.resample_noise(rng);
  const auto x = random_tensor({4, 3}, rng, -1, 1, false);
  const auto eval = layer.forward(x, Mode::Eval);
  const auto reference = linear(x, layer.weight_mu, layer.bias_mu);
  for (std::size_t i = 0; i < eval.numel(); ++i) EXPECT_DOUBLE_EQ(eval.data()[i], reference.data()[i]);
}

TEST(NoisyLinear, TrainModeMatchesFactorisedFormula) {
  Rng rng(3);
  NoisyLinear<double> layer(3, 2, 0.5, rng);
  layer.set_noise({0.5, -1.0, 2.0}, {-0.3, 1.2});
  const auto x = random_tensor({1, 3}, rng, -1, 1, false);
  const auto y = layer.forward(x, Mode::Train);
  for (std::size_t o = 0; o < 2; ++o) {
    double expected = layer.bias_mu.data()[o] + layer.bias_sigma.data()[o] * layer.noise_out()[o];
    for (std::size_t i = 0; i < 3; ++i) {
      const double w = layer.weight_mu.at({o, i}) +
                       layer.weight_sigma.at({o, i}) * layer.noise_out()[o] * layer.noise_in()[i];
      expected += w * x.data()[i];
    }
    EXPECT_NEAR(y.data()[o], expected, 1e-12);
  }
}

TEST(NoisyLinear, NoiseFollowsSignSqrtTransform) {
  // eps = sign(u) sqrt(|u|) with u ~ N(0,1): E[eps] = 0 and E[eps^2] = E|u| = sqrt(2/pi).
  Rng rng(4);
  NoisyLinear<double> layer(1000, 1, 0.1, rng);
  double first = 0;
  double second = 0;
  const int rounds = 50;
  for (int r = 0; r < rounds; ++r) {
    layer.resample_noise(rng);
    for (double e : layer.noise_in()) {
      first += e;
      second += e * e;
    }
  }
  const double n = 1000.0 * rounds;
  EXPECT_NEAR(first / n, 0.0, 0.01);
  EXPECT_NEAR(second / n, std::sqrt(2.0 / std::numbers::pi), 0.01);
}

TEST(NoisyLinear, GradientsWithFrozenNoise) {
  Rng rng(5);
  NoisyLinear<double> layer(4, 3, 0.3, rng);
  layer.resample_noise(rng);
  std::mt19937_64 data_rng(6);
  expect_gradients_match(
      [&](const std::vector<TensorD>& in) {
        layer.weight_mu = in[1];
        layer.weight_sigma = in[2];
        layer.bias_mu = in[3];
        layer.bias_sigma = in[4];
        return weighted_sum(layer.forward(in[0], Mode::Train));
      },
      {random_tensor({2, 4}, data_rng), layer.weight_mu, layer.weight_sigma, layer.bias_mu, layer.bias_sigma});
}

TEST(Attention, SingleHeadIdentityMatchesDirectFormula) {
  std::mt19937_64 rng(7);
  Rng init(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t lq = 1 + trial % 4;
    const std::size_t lk = 1 + trial % 6;
    const std::size_t d = 1 + trial % 8;
    MultiHeadAttention<double> mha(d, 1, init);
    mha.set_identity_projections();
    const auto q = random_tensor({lq, d}, rng, -2, 2, false);
    const auto kv = random_tensor({lk, d}, rng, -2, 2, false);
    const auto out = mha.forward(q, kv);
    const auto expected = scaled_dot_attention(rows_of(q), rows_of(kv), rows_of(kv));
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at({i, c}), expected[i][c], 1e-12);
  }
}

TEST(Attention, MultiHeadMatchesPerHeadOracle) {
  std::mt19937_64 rng(9);
  Rng init(10);
  const std::size_t d = 8, heads = 2, dh = 4, lq = 3, lk = 5;
  MultiHeadAttention<double> mha(d, heads, init);
  for (auto* proj : {&mha.query, &mha.key, &mha.value, &mha.output}) proj->bias = random_tensor({d}, rng);
  const auto q = random_tensor({lq, d}, rng, -1, 1, false);
  const auto kv = random_tensor({lk, d}, rng, -1, 1, false);
  const auto out = mha.forward(q, kv);

  const auto qp = affine(rows_of(q), mha.query.weight, mha.query.bias);
  const auto kp = affine(rows_of(kv), mha.key.weight, mha.key.bias);
  const auto vp = affine(rows_of(kv), mha.value.weight, mha.value.bias);
  Matrix context(lq, std::vector<double>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    auto slice = [&](const Matrix& m) {
      Matrix s(m.size(), std::vector<double>(dh));
      for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < dh; ++c) s[r][c] = m[r][h * dh + c];
      return s;
    };
    Matrix weights;
    const auto head = scaled_dot_attention(slice(qp), slice(kp), slice(vp), &weights);
    for (std::size_t r = 0; r < lq; ++r) {
      for (std::size_t c = 0; c < dh; ++c) context[r][h * dh + c] = head[r][c];
      for (std::size_t j = 0; j < lk; ++j) EXPECT_NEAR(mha.last_attention().at({0, h, r, j}), weights[r][j], 1e-12);
    }
  }
  const auto expected = affine(context, mha.output.weight, mha.output.bias);
  for (std::size_t i = 0; i < lq; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at({i, c}), expected[i][c], 1e-12);
}

TEST(Attention, RowsAreStochasticAndShapeIsRecorded) {
  std::mt19937_64 rng(11);
  Rng init(12);
  MultiHeadAttention<double> mha(8, 4, init);
  mha.forward(random_tensor({2, 3, 8}, rng, -3, 3, false), random_tensor({2, 7, 8}, rng, -3, 3, false));
  const auto& attn = mha.last_attention();
  ASSERT_EQ(attn.shape(), (Shape{2, 4, 3, 7}));
  for (std::size_t row = 0; row < attn.numel() / 7; ++row) {
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(attn.data()[row * 7 + j], 0.0);
      total += attn.data()[row * 7 + j];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
  Rng init(13);
  MultiHeadAttention<double> mha(4, 2, init);
  const TensorD q({2, 4}, {0.3, -1, 2, 0.5, 1, 1, -1, 0});
  std::vector<double> kv;
  for (int i = 0; i < 5; ++i) kv.insert(kv.end(), {0.2, 0.4, -0.6, 0.8});
  mha.forward(q, TensorD({5, 4}, kv));
  for (double w : mha.last_attention().data()) EXPECT_NEAR(w, 0.2, 1e-12);
}

TEST(Attention, RejectsEmptyAndMismatchedInputs) {
  Rng init(14);
  MultiHeadAttention<double> mha(4, 2, init);
  EXPECT_THROW(mha.forward(TensorD::zeros({0, 4}), TensorD::zeros({3, 4})), ContractError);
  EXPECT_THROW(mha.forward(TensorD::zeros({2, 5}), TensorD::zeros({3, 5})), DimensionError);
  EXPECT_THROW(MultiHeadAttention<double>(6, 4, init), ContractError);
}

TEST(PositionalEncoding, MatchesRowColumnSinusoids) {
  const std::size_t gh = 3, gw = 4, d = 8;
  const PositionalEncoding<double> pe(gh, gw, d);
  ASSERT_EQ(pe.table().shape(), (Shape{gh * gw, d}));
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      for (std::size_t i = 0; i < d / 4; ++i) {
        const double freq = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(i) / (d / 2.0));
        const std::size_t token = y * gw + x;
        EXPECT_NEAR(pe.table().at({token, 2 * i}), std::sin(y * freq), 1e-12);
        EXPECT_NEAR(pe.table().at({token, 2 * i + 1}), std::cos(y * freq), 1e-12);
        EXPECT_NEAR(pe.table().at({token, d / 2 + 2 * i}), std::sin(x * freq), 1e-12);
        EXPECT_NEAR(pe.table().at({token, d / 2 + 2 * i + 1}), std::cos(x * freq), 1e-12);
      }
}

TEST(PositionalEncoding, DistinctPatchesGetDistinctCodes) {
  const PositionalEncoding<double> pe(7, 7, 16);
  const auto rows = rows_of(pe.table());
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b) EXPECT_NE(rows[a], rows[b]);
}

TEST(EncoderLayer, TwoTokenIdentityCaseMatchesComposedOracle) {
  Rng init(15);
  std::mt19937_64 rng(16);
  const std::size_t d = 4;
  EncoderLayer<double> layer(d, 1, 6, init);
  layer.self_attn.set_identity_projections();
  const auto tokens = random_tensor({2, d}, rng, -1, 1, false);
  const auto out = layer.forward(tokens);

  const auto x = rows_of(tokens);
  const auto a = normalize_rows(plus(x, scaled_dot_attention(x, x, x)));
  const auto hidden = affine(a, layer.feedforward.expand.weight, layer.feedforward.expand.bias);
  Matrix relu_hidden = hidden;
  for (auto& row : relu_hidden)
    for (double& v : row) v = std::max(v, 0.0);
  const auto ff = affine(relu_hidden, layer.feedforward.contract.weight, layer.feedforward.contract.bias);
  const auto expected = normalize_rows(plus(a, ff));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at({i, c}), expected[i][c], 1e-10);
}

TEST(EncoderLayer, PreservesShapeAndPassesGradientCheck) {
  Rng init(17);
  std::mt19937_64 rng(18);
  EncoderLayer<double> layer(4, 2, 5, init);
  const auto tokens = random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(layer.forward(tokens).shape(), tokens.shape());
  expect_gradients_match([&](const std::vector<TensorD>& in) { return weighted_sum(layer.forward(in[0])); },
                         {tokens, layer.self_attn.query.weight, layer.feedforward.expand.weight, layer.norm1.gain});
}

TEST(DecoderLayer, GradientCheckThroughQueriesAndMemory) {
  Rng init(19);
  std::mt19937_64 rng(20);
  DecoderLayer<double> layer(4, 2, 5, init);
  const auto queries = random_tensor({1, 2, 4}, rng);
  const auto memory = random_tensor({1, 5, 4}, rng);
  const auto out = layer.forward(queries, memory);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 4}));
  EXPECT_EQ(layer.cross_attn.last_attention().shape(), (Shape{1, 2, 2, 5}));
  expect_gradients_match(
      [&](const std::vector<TensorD>& in) { return weighted_sum(layer.forward(in[0], in[1])); },
      {queries, memory, layer.cross_attn.key.weight, layer.self_attn.value.weight, layer.norm3.bias});
}

TEST(CopyParameters, RejectsMismatchedLists) {
  Rng init(21);
  Linear<double> a(3, 2, init);
  Linear<double> b(3, 2, init);
  Linear<double> c(4, 2, init);
  ParameterList<double> pa, pb, pc;
  a.collect(pa, "l");
  b.collect(pb, "l");
  c.collect(pc, "l");
  copy_parameters(pa, pb);
  EXPECT_EQ(std::vector<double>(a.weight.data().begin(), a.weight.data().end()),
            std::vector<double>(b.weight.data().begin(), b.weight.data().end()));
  EXPECT_THROW(copy_parameters(pa, pc), DimensionError);
}

}  // namespace
}  // namespace aqt::nn
