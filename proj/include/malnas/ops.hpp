// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "malnas/rng.hpp"
#include "malnas/tensor.hpp"

namespace malnas {

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[m,n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add_n(std::span<const Tensor> terms);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x * weights[index]; gradient flows to both x and the selected weight.
Tensor scale_by_element(const Tensor& x, const Tensor& weights,
                        std::size_t index);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
// Softmax over the last axis.
Tensor softmax(const Tensor& x);

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { relu, elu, sigmoid, tanh };

std::string_view to_string(Activation kind);
Activation parse_activation(std::string_view name);

// ELU uses alpha = 1.
Tensor activation(const Tensor& x, Activation kind);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor sigmoid(const Tensor& x) {
  return activation(x, Activation::sigmoid);
}

// ---------------------------------------------------------------------------
// Convolution and pooling (NCHW)
// ---------------------------------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

// Output extent along one spatial axis; throws DimensionError when the
// result would be non-positive.
std::size_t conv_output_size(std::size_t input, std::size_t kernel,
                             std::size_t stride, std::size_t padding,
                             std::size_t dilation);

// Cross-correlation. kernel is [c_out, c_in/groups, kh, kw]; no bias.
Tensor conv2d(const Tensor& x, const Tensor& kernel,
              const Conv2dOptions& options = {});

enum class PoolKind { avg, max };

struct Pool2dOptions {
  std::size_t size = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Average pooling divides by the number of in-bounds elements. Max pooling
// routes the gradient to the first maximal element in scan order.
Tensor pool2d(const Tensor& x, PoolKind kind, const Pool2dOptions& options);

// [b,c,h,w] -> [b,c]
Tensor global_avg_pool(const Tensor& x);
// Concatenate along the channel axis of NCHW tensors.
Tensor concat_channels(std::span<const Tensor> parts);
// x[:, :, top:top+height, left:left+width]
Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left,
              std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// Normalization and regularization
// ---------------------------------------------------------------------------

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// Per-channel normalization of [b,c,h,w]. gamma/beta may be undefined
// tensors (no affine transform). Train mode normalizes with batch
// statistics and updates the running estimates (unbiased variance); eval
// mode uses the running estimates.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, Mode mode);

// Inverted dropout.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);

// ---------------------------------------------------------------------------
// Losses (mean over elements)
// ---------------------------------------------------------------------------

enum class LossKind {
  bce,          // pred in (0,1), clamped to [1e-7, 1 - 1e-7]
  mse,
  poisson_log,  // pred is a log-rate: exp(pred) - target * pred
};

inline constexpr double kBceClamp = 1e-7;

Tensor loss(LossKind kind, const Tensor& pred, const Tensor& target);

}  // namespace malnas
