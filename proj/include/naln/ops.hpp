#pragma once

#include <cstddef>
#include <vector>

#include "naln/rng.hpp"
#include "naln/tensor.hpp"

namespace naln::ops {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, std::size_t d0, std::size_t d1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t dim);
/// Rows [begin, end) along dim 0.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

/// Same-style padding for a kernel of length k with the given dilation.
inline std::size_t same_padding(std::size_t k, std::size_t dilation) {
  return dilation * (k - 1) / 2;
}

/// 1-D convolution (cross-correlation) over [B,C,T] with kernel [F,C/groups,K].
/// `bias` may be undefined.
Tensor conv1d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1,
              std::size_t dilation = 1, std::size_t groups = 1, std::size_t padding = 0);

/// Spatial filtering over the electrode axis: [B,C,E,T] with kernel [C*D,1,E,1]
/// gives [B,C*D,1,T].
Tensor depthwise_conv_channels(const Tensor& input, const Tensor& kernel, std::size_t depth_multiplier);

/// Average pooling over [B,C,T]. Padding is zero-valued and counted in the
/// window mean; `pad_right` lets even windows keep the input length.
Tensor avg_pool1d(const Tensor& input, std::size_t k, std::size_t stride, std::size_t pad_left = 0,
                  std::size_t pad_right = 0);
Tensor global_avg_pool(const Tensor& input);

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
Tensor elu(const Tensor& x, double alpha = 1.0);
/// Inverted dropout. Identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training = true);
Tensor log_softmax(const Tensor& x);

/// y[k,c,...] = weight[c] * x[k,c,...] + bias[c] for x of rank >= 2.
Tensor channel_affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Per-group standardization of [K,C,T] or [K,C]. Rows [bounds[g], bounds[g+1])
/// form a group; mean and population std are taken per channel over the
/// group's rows and time, and the output is (x - mean) / max(std, eps).
/// Gradients flow through the statistics.
Tensor group_standardize(const Tensor& x, const std::vector<std::size_t>& bounds, double eps);

/// [M,N] -> [1,N] column mean. The reduction sorts each column before
/// summing, so the result does not depend on row order.
Tensor mean_rows(const Tensor& x);
/// [1,N] -> [M,N].
Tensor broadcast_rows(const Tensor& x, std::size_t m);

/// Sum of values that is independent of their order.
double order_invariant_sum(std::vector<double> values);

}  // namespace naln::ops
