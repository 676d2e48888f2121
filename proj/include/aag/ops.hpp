#pragma once

#include <span>
#include <vector>

#include "aag/tensor.hpp"

// Differentiable tensor operations. Image tensors are N x C x H x W,
// row-major. Every function records a backward rule when any input
// requires a gradient and recording is enabled.
namespace aag {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Reductions to a single-element tensor of shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Numerically stable (max-subtracted) softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,kH,kW] plus an
// optional bias[Cout] (pass an undefined tensor to omit it). Zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opts = {});

// Max over k x k windows. Gradient goes to the first maximal element of each
// window in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k, std::size_t stride);

// Bilinear upsampling with half-pixel (align-corners-false) coordinates:
// src = (dst + 0.5) * in / out - 0.5, clamped to the valid range.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// Per-channel normalization. Train mode normalizes with the biased batch
// variance and folds the unbiased variance into the running estimate; eval
// mode uses the running statistics and leaves them untouched.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                      BatchNormOptions opts = {});

// x[N,F] * weight[F,G] + bias[G]
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  std::vector<Tensor<T>> v(parts);
  return concat(std::span<const Tensor<T>>(v), axis);
}

// Elements [begin, end) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

// [N,C,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Lowest index of the maximum; used everywhere a class is picked.
template <typename T>
std::size_t argmax(std::span<const T> values);

}  // namespace aag
