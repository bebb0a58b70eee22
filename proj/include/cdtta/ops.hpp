#pragma once

#include <span>
#include <vector>

#include "cdtta/tensor.hpp"

namespace cdtta {

// Cross-correlation with a (out_c, in_c, k, k) kernel, symmetric zero padding.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights, std::span<const T> bias,
                      int stride, int padding);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;   // empty unless requested
  BasicTensor<T> weights; // empty unless requested
  std::vector<T> bias;    // empty unless requested
};

struct ConvGradRequest {
  bool input = true;
  bool params = true;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights, int stride, int padding,
                             const BasicTensor<T>& upstream, ConvGradRequest request = {});

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

// `activation` may be either the relu input or its output; both have the same positive set.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& activation, const BasicTensor<T>& upstream);

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits);

// Vector-Jacobian product of the channel softmax: returns dL/dlogits given probs and dL/dprobs.
template <typename T>
BasicTensor<T> softmax_channels_backward(const BasicTensor<T>& probs, const BasicTensor<T>& upstream);

// Bilinear upsampling with the half-pixel (align_corners = false) convention.
template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int factor);

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& upstream, int factor, const Shape& input_shape);

enum class StatsScope { per_sample, per_batch };

template <typename T>
std::vector<ChannelStats> channel_statistics(const BasicTensor<T>& input, StatsScope scope);

}  // namespace cdtta
