#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tmblock/autodiff/tensor.hpp"

namespace tmb::ad {

enum class Padding { same, valid };

/// count_valid divides by the number of in-bounds cells; zero_pad always
/// divides by the full window area.
enum class PoolBorder { count_valid, zero_pad };

struct Conv2dOptions {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

struct PoolOptions {
  std::size_t window_h = 2;
  std::size_t window_w = 2;
  std::size_t stride = 1;
  Padding padding = Padding::valid;
  PoolBorder border = PoolBorder::count_valid;
};

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);

// Shape.
Tensor reshape(const Tensor& a, Shape shape);
/// Concatenation along axis 1; all other dims must agree.
Tensor concat_channels(std::span<const Tensor> parts);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N,I] * weight[O,I]^T + bias[O]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Normalized exponentials and losses.
Tensor softmax(const Tensor& a, std::size_t axis);
/// Mean over the batch of -log softmax(logits[n])[labels[n]]; logits is [N,C].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Per-pixel cross-entropy of scores[N,C,H,W] against the image label of each
/// pixel, averaged over N*H*W.
Tensor cross_entropy_map(const Tensor& scores, std::span<const int> labels);

// Spatial.
/// input[N,C,H,W] (*) kernel[K,C,kh,kw] (+ bias[K]); bias may be undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              Conv2dOptions options = {});
Tensor avg_pool(const Tensor& input, PoolOptions options);
/// [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& input);

/// Output spatial extent of a conv/pool along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t window, std::size_t stride,
                               Padding padding);
/// Leading pad of a same-padded window along one axis.
std::size_t same_pad_before(std::size_t in, std::size_t window, std::size_t stride);

}  // namespace tmb::ad
