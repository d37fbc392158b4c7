#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "p2i/tensor.hpp"

namespace p2i {

/// Weights and biases of one convolution layer. Kernels are laid out as
/// [out_channels][in_channels][kernel_h][kernel_w].
template <typename T>
struct LayerParams {
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  std::vector<T> kernels;
  std::vector<T> biases;

  LayerParams() = default;
  LayerParams(int out_ch, int in_ch, int kh, int kw)
      : out_channels(out_ch),
        in_channels(in_ch),
        kernel_h(kh),
        kernel_w(kw),
        kernels(static_cast<std::size_t>(out_ch) * in_ch * kh * kw, T(0)),
        biases(static_cast<std::size_t>(out_ch), T(0)) {}

  std::size_t kernel_size() const { return static_cast<std::size_t>(kernel_h) * kernel_w; }
  std::size_t count() const { return kernels.size() + biases.size(); }

  T& weight(int k, int c, int dy, int dx) {
    return kernels[((static_cast<std::size_t>(k) * in_channels + c) * kernel_h + dy) * kernel_w + dx];
  }
  const T& weight(int k, int c, int dy, int dx) const {
    return kernels[((static_cast<std::size_t>(k) * in_channels + c) * kernel_h + dy) * kernel_w + dx];
  }

  /// Throws unless kernel count and bias count agree with the declared extents.
  void validate() const;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <typename To, typename From>
LayerParams<To> params_cast(const LayerParams<From>& p) {
  LayerParams<To> out;
  out.out_channels = p.out_channels;
  out.in_channels = p.in_channels;
  out.kernel_h = p.kernel_h;
  out.kernel_w = p.kernel_w;
  out.kernels.assign(p.kernels.begin(), p.kernels.end());
  out.biases.assign(p.biases.begin(), p.biases.end());
  return out;
}

// Convolution with "same" zero padding, stride 1, odd kernels. Per output
// element the accumulation order is bias, then input channel, kernel row,
// kernel column.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const LayerParams<T>& params);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  LayerParams<T> params;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const LayerParams<T>& params,
                             const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);
/// Gradient passes only where input > 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out);

/// Logistic function with the argument clamped to [-40, 40].
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input);
/// Takes the forward *output* of sigmoid.
template <typename T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  // Flat index into the input tensor of the element selected for each output.
  std::vector<std::uint32_t> argmax;
};

/// 2x2 max-pooling, stride 2. Ties go to the first element in row-major order.
template <typename T>
PoolResult<T> maxpool2(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> maxpool2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                 const BasicTensor<T>& grad_out);

/// Nearest-neighbour 2x up-sampling (each value duplicated into a 2x2 block).
template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& input);
template <typename T>
BasicTensor<T> upsample2_backward(const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// Splits grad_out into the channel ranges [0, channels_a) and [channels_a, C).
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> concat_backward(const BasicTensor<T>& grad_out, int channels_a);

}  // namespace p2i
