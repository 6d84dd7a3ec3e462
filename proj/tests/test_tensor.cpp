#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "aqt/ops.hpp"
#include "aqt/serialize.hpp"
#include "test_util.hpp"

namespace aqt {
namespace {

using testing::expect_gradients_match;
using testing::random_tensor;
using testing::weighted_sum;

std::vector<double> naive_matmul(const TensorD& a, const TensorD& b, std::size_t m, std::size_t k, std::size_t n,
                                 std::size_t a_off = 0, std::size_t b_off = 0) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a.data()[a_off + i * k + p] * b.data()[b_off + p * n + j];
  return out;
}

TEST(Tensor, ConstructionChecksSize) {
  EXPECT_THROW(TensorD({2, 3}, std::vector<double>(5)), DimensionError);
  const auto t = TensorD::full({2, 2}, 3.0);
  EXPECT_EQ(t.numel(), 4u);
  EXPECT_DOUBLE_EQ(t.at({1, 1}), 3.0);
}

TEST(Tensor, MatmulMatchesNaiveLoops) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor({5, 7}, rng);
  const auto b = random_tensor({7, 3}, rng);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{5, 3}));
  const auto expected = naive_matmul(a, b, 5, 7, 3);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.data()[i], expected[i], 1e-12);
}

TEST(Tensor, BatchedMatmulMatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  const auto a = random_tensor({3, 4, 6}, rng);
  const auto b = random_tensor({3, 6, 2}, rng);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 4, 2}));
  for (std::size_t batch = 0; batch < 3; ++batch) {
    const auto expected = naive_matmul(a, b, 4, 6, 2, batch * 24, batch * 12);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.data()[batch * 8 + i], expected[i], 1e-12);
  }
}

TEST(Tensor, MatmulNtEqualsMatmulWithTranspose) {
  std::mt19937_64 rng(3);
  const auto a = random_tensor({2, 4, 5}, rng);
  const auto b = random_tensor({3, 5}, rng);
  const auto c = matmul_nt(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 3}));
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = 0;
        for (std::size_t p = 0; p < 5; ++p) acc += a.at({bi, i, p}) * b.at({j, p});
        EXPECT_NEAR(c.at({bi, i, j}), acc, 1e-12);
      }
}

TEST(Tensor, MatmulRejectsInnerMismatch) {
  const auto a = TensorD::zeros({2, 3});
  const auto b = TensorD::zeros({4, 2});
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Tensor, Conv2dMatchesDirectLoops) {
  std::mt19937_64 rng(4);
  const std::size_t n = 2, c = 3, h = 9, w = 8, o = 4, k = 3, stride = 2;
  const auto input = random_tensor({n, c, h, w}, rng);
  const auto kernel = random_tensor({o, c, k, k}, rng);
  const auto bias = random_tensor({o}, rng);
  const auto out = conv2d(input, kernel, bias, stride);
  const std::size_t oh = (h - k) / stride + 1;
  const std::size_t ow = (w - k) / stride + 1;
  ASSERT_EQ(out.shape(), (Shape{n, o, oh, ow}));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias.data()[f];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                acc += input.at({b, ch, y * stride + dy, x * stride + dx}) * kernel.at({f, ch, dy, dx});
          EXPECT_NEAR(out.at({b, f, y, x}), acc, 1e-12);
        }
}

TEST(Tensor, Conv2dRejectsKernelLargerThanInput) {
  EXPECT_THROW(conv2d(TensorD::zeros({1, 1, 2, 2}), TensorD::zeros({1, 1, 3, 3}), 1), DimensionError);
  EXPECT_THROW(conv2d(TensorD::zeros({1, 2, 4, 4}), TensorD::zeros({1, 3, 3, 3}), 1), DimensionError);
}

TEST(Tensor, SoftmaxMatchesHighPrecisionReference) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({3, 6}, rng, -30.0, 30.0);
  const auto y = softmax(x);
  const auto ly = log_softmax(x);
  for (std::size_t r = 0; r < 3; ++r) {
    long double total = 0;
    for (std::size_t i = 0; i < 6; ++i) total += std::exp(static_cast<long double>(x.at({r, i})));
    double row = 0;
    for (std::size_t i = 0; i < 6; ++i) {
      const long double p = std::exp(static_cast<long double>(x.at({r, i}))) / total;
      EXPECT_NEAR(y.at({r, i}), static_cast<double>(p), 1e-14);
      EXPECT_NEAR(ly.at({r, i}), static_cast<double>(std::log(p)), 1e-12);
      row += y.at({r, i});
    }
    EXPECT_NEAR(row, 1.0, 1e-14);
  }
}

TEST(Tensor, SoftmaxIsStableForLargeInputs) {
  const Tensor x({3}, {1000.f, 1000.f, -1000.f});
  const auto y = softmax(x);
  EXPECT_FLOAT_EQ(y.data()[0], 0.5f);
  EXPECT_FLOAT_EQ(y.data()[2], 0.0f);
}

TEST(Tensor, SoftmaxRejectsNan) {
  const TensorD x({2}, {0.0, std::numeric_limits<double>::quiet_NaN()});
  EXPECT_THROW(softmax(x), NumericError);
}

TEST(Tensor, LayerNormMatchesDirectFormula) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 5}, rng, -3.0, 3.0);
  const auto gain = random_tensor({5}, rng);
  const auto bias = random_tensor({5}, rng);
  const auto y = layer_norm(x, gain, bias);
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0;
    for (std::size_t i = 0; i < 5; ++i) mu += x.at({r, i});
    mu /= 5;
    double var = 0;
    for (std::size_t i = 0; i < 5; ++i) var += (x.at({r, i}) - mu) * (x.at({r, i}) - mu);
    var /= 5;
    for (std::size_t i = 0; i < 5; ++i) {
      const double expected = (x.at({r, i}) - mu) / std::sqrt(var + 1e-5) * gain.data()[i] + bias.data()[i];
      EXPECT_NEAR(y.at({r, i}), expected, 1e-12);
    }
  }
}

TEST(Tensor, BroadcastingAdd) {
  const TensorD a({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  const TensorD b({4, 1}, {10, 20, 30, 40});
  const auto c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4, 3}));
  EXPECT_DOUBLE_EQ(c.at({1, 2, 0}), 4 + 30);
  EXPECT_DOUBLE_EQ(c.at({0, 3, 2}), 3 + 40);
  EXPECT_THROW(add(TensorD::zeros({2, 3}), TensorD::zeros({4, 3})), DimensionError);
}

TEST(Tensor, PermuteAndReductions) {
  const TensorD x({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto t = transpose(x, 0, 1);
  ASSERT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_DOUBLE_EQ(t.at({2, 1}), 6);
  const auto s0 = sum_axis(x, 0);
  EXPECT_EQ(s0.shape(), (Shape{3}));
  EXPECT_DOUBLE_EQ(s0.data()[1], 7);
  const auto m1 = mean_axis(x, 1, true);
  EXPECT_EQ(m1.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(m1.data()[1], 5);
  EXPECT_DOUBLE_EQ(sum(x).item(), 21);
  EXPECT_DOUBLE_EQ(mean(x).item(), 3.5);
}

TEST(Tensor, SelectRowsPicksPerBatchEntry) {
  const TensorD x({2, 3, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  const std::vector<int> index{2, 0};
  const auto y = select_rows(x, std::span<const int>(index));
  ASSERT_EQ(y.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(y.at({0, 1}), 5);
  EXPECT_DOUBLE_EQ(y.at({1, 0}), 6);
}

TEST(Autograd, BackwardRequiresScalar) {
  const auto x = TensorD::full({3}, 1.0, true);
  auto y = scale(x, 2.0);
  EXPECT_THROW(y.backward(), ContractError);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  const TensorD x({1}, {3.0}, true);
  auto y = sum(add(mul(x, x), x));
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 1.0);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  const TensorD x({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = sum(mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, ElementwiseAndBroadcastGradients) {
  std::mt19937_64 rng(10);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) {
        const auto s = add(in[0], in[1]);
        const auto d = sub(s, in[2]);
        return weighted_sum(mul(relu(d), square(in[0])));
      },
      {random_tensor({2, 3, 4}, rng), random_tensor({3, 1}, rng), random_tensor({4}, rng)});
}

TEST(Autograd, ScaleAndShiftGradients) {
  std::mt19937_64 rng(11);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) { return weighted_sum(add_scalar(scale(in[0], -1.7), 0.3)); },
      {random_tensor({5}, rng)});
}

TEST(Autograd, MatmulGradients) {
  std::mt19937_64 rng(12);
  expect_gradients_match([](const std::vector<TensorD>& in) { return weighted_sum(matmul(in[0], in[1])); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
  expect_gradients_match([](const std::vector<TensorD>& in) { return weighted_sum(matmul(in[0], in[1])); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)});
  expect_gradients_match([](const std::vector<TensorD>& in) { return weighted_sum(matmul_nt(in[0], in[1])); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)});
}

TEST(Autograd, LinearGradients) {
  std::mt19937_64 rng(13);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) { return weighted_sum(linear(in[0], in[1], in[2])); },
      {random_tensor({2, 3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)});
}

TEST(Autograd, Conv2dGradients) {
  std::mt19937_64 rng(14);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) { return weighted_sum(conv2d(in[0], in[1], in[2], 2)); },
      {random_tensor({2, 2, 7, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
}

TEST(Autograd, SoftmaxGradients) {
  std::mt19937_64 rng(15);
  expect_gradients_match([](const std::vector<TensorD>& in) { return weighted_sum(softmax(in[0])); },
                         {random_tensor({3, 5}, rng, -2.0, 2.0)});
  expect_gradients_match([](const std::vector<TensorD>& in) { return weighted_sum(log_softmax(in[0])); },
                         {random_tensor({3, 5}, rng, -2.0, 2.0)});
}

TEST(Autograd, LayerNormGradients) {
  std::mt19937_64 rng(16);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) { return weighted_sum(layer_norm(in[0], in[1], in[2])); },
      {random_tensor({3, 6}, rng, -2.0, 2.0), random_tensor({6}, rng), random_tensor({6}, rng)});
}

TEST(Autograd, ShapeOpGradients) {
  std::mt19937_64 rng(17);
  expect_gradients_match(
      [](const std::vector<TensorD>& in) {
        const auto p = permute(reshape(in[0], Shape{2, 3, 4}), {2, 0, 1});
        return weighted_sum(add(sum_axis(p, 1, true), mean_axis(p, 2, true)));
      },
      {random_tensor({6, 4}, rng)});
  const std::vector<int> index{1, 0, 2};
  expect_gradients_match(
      [&](const std::vector<TensorD>& in) { return weighted_sum(select_rows(in[0], std::span<const int>(index))); },
      {random_tensor({3, 3, 2}, rng)});
}

TEST(Serialize, RoundTripPreservesShapeAndValues) {
  const Tensor t({2, 3}, {1.5f, -2.f, 0.f, 3.25f, 1e-8f, -7.f});
  std::stringstream buffer;
  write_tensor(buffer, t);
  const auto back = read_tensor(buffer);
  EXPECT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back.data()[i], t.data()[i]);
}

TEST(Serialize, LayoutIsLittleEndianRankDimsFloats) {
  const Tensor t({1}, {1.0f});
  std::stringstream buffer;
  write_tensor(buffer, t);
  const std::string bytes = buffer.str();
  ASSERT_EQ(bytes.size(), 8u + 8u + 4u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[19]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[18]), 0x80);
}

TEST(Serialize, TruncatedInputThrows) {
  std::stringstream buffer(std::string("\x02\x00\x00", 3));
  EXPECT_THROW(read_tensor(buffer), IoError);
  EXPECT_THROW(load_tensor("/nonexistent/dir/x.tensor"), IoError);
}

}  // namespace
}  // namespace aqt
