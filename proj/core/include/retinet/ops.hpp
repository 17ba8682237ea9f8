#pragma once

#include <cstddef>
#include <span>
#include <type_traits>

#include "retinet/rng.hpp"
#include "retinet/tensor.hpp"

// Differentiable layer math. Every op has a hand-written backward. All ops are
// templates instantiated for float (production) and double (verification).
namespace retinet::ops {

enum class Mode { train, infer };

enum class Padding { same, valid };

struct ConvSpec {
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding = Padding::same;
  std::size_t groups = 1;
};

// Output size and leading padding for one convolution. `same` padding gives
// ceil(in / stride) with the odd padding pixel on the bottom/right.
struct ConvGeometry {
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  std::size_t pad_top = 0;
  std::size_t pad_left = 0;
};

ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, const ConvSpec& spec);

// Shape checks shared by forward and backward; throws ShapeError.
void validate_conv(const Shape& input, const Shape& weights, const ConvSpec& spec);

// Which gradients a backward call should produce. Skipped gradients are
// returned as empty tensors.
struct GradRequest {
  bool input = true;
  bool params = true;
};

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

// input [N,C,H,W], weights [Cout, C/groups, kh, kw], optional bias [Cout].
// Per output element the sum runs over (c, kh, kw) with kw innermost; the
// bias is added after the sum.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                      const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, const ConvSpec& spec, bool with_bias,
                             GradRequest request = {});

// Dedicated per-channel kernel. weights [C,1,kh,kw]; spec must have
// groups == out_channels == C. Bitwise equal to conv2d with groups == C.
template <typename T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                const std::type_identity_t<BasicTensor<T>>* bias, const ConvSpec& spec);

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& grad_out,
                                       const BasicTensor<T>& input,
                                       const BasicTensor<T>& weights, const ConvSpec& spec,
                                       bool with_bias, GradRequest request = {});

template <typename T>
struct DenseGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

// input [N,D], weights [D,U], bias [U] -> [N,U]
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                     const BasicTensor<T>& bias);

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, GradRequest request = {});

// ---- batch normalization -------------------------------------------------

struct BatchNormOptions {
  double momentum = 0.99;
  double epsilon = 1e-3;
  Mode mode = Mode::infer;
  // Train mode only: fold batch statistics into the running estimates.
  bool update_running = true;
};

// Per-channel state. Train mode normalizes with the biased batch variance over
// (N,H,W) and updates running <- momentum*running + (1-momentum)*batch.
template <typename T>
struct BatchNormState {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.99;
  double epsilon = 1e-3;
  Mode mode = Mode::infer;

  static BatchNormState identity(std::size_t channels);
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> x_hat;
  std::vector<T> inv_std;
  Mode mode = Mode::infer;
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, const BatchNormOptions& options,
                          std::type_identity_t<BatchNormCache<T>>* cache);

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, BatchNormState<T>& state,
                          std::type_identity_t<BatchNormCache<T>>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& grad_out,
                                      const BatchNormCache<T>& cache,
                                      const BasicTensor<T>& gamma, GradRequest request = {});

// ---- pointwise, pooling, reshape ----------------------------------------

enum class Activation { relu, relu6 };

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& input, Activation kind);

// Passes the gradient only strictly inside the linear region.
template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                   Activation kind);

// [N,C,H,W] -> [N,C]
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape);

// Keeps N, collapses the rest. Identity on rank-2 input.
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> flatten_backward(const BasicTensor<T>& grad_out, const Shape& input_shape);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Inverted dropout. `mask` holds the per-element multiplier: 0 for dropped
// elements, 1/(1-rate) for kept ones (all ones in infer mode).
template <typename T>
struct DropoutResult {
  BasicTensor<T> output;
  BasicTensor<T> mask;
};

template <typename T>
DropoutResult<T> dropout(const BasicTensor<T>& input, double rate, Xoshiro256pp& rng, Mode mode);

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& mask);

// ---- classification output ------------------------------------------------

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <typename T>
struct SoftmaxCrossEntropy {
  double loss = 0.0;
  BasicTensor<T> probs;
  BasicTensor<T> grad_logits;
};

// Mean over the batch of -log p[label]. grad = (probs - onehot) / N.
template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                             std::span<const int> labels);

}  // namespace retinet::ops
