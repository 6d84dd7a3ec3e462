#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "aqt/tensor.hpp"

// Differentiable tensor operations. Every function records a backward
// closure when any input requires a gradient and recording is enabled.
namespace aqt {

// Elementwise with numpy-style broadcasting.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> scale(const BasicTensor<T>& x, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> square(const BasicTensor<T>& x);

/// a[..., M, K] x b[K, N] or a[..., M, K] x b[..., K, N] (same batch dims).
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// a x b^T over the last two axes: a[..., M, K], b[N, K] or b[..., N, K].
template <typename T> BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x[..., in] x weight[out, in]^T + bias[out].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);
template <typename T> BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight);

/// Valid (unpadded) 2-D convolution. input [N, C, H, W], kernel [O, C, kh, kw].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, std::size_t stride);
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t stride);

/// Softmax over the last axis. Throws NumericError on NaN input.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log_softmax(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          T epsilon = T(1e-5));

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x, std::size_t axis0, std::size_t axis1);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> sum_axis(const BasicTensor<T>& x, std::size_t axis, bool keepdim = false);
template <typename T> BasicTensor<T> mean_axis(const BasicTensor<T>& x, std::size_t axis, bool keepdim = false);

/// For x[B, A, ...] returns y[B, ...] with y[b] = x[b, index[b]].
template <typename T> BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const int> index);

/// Result shape of broadcasting two shapes; throws DimensionError if incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T> BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T> BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T> BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }

}  // namespace aqt
