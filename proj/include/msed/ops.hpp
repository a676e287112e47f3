/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <cstddef>
#include <vector>

#include "msed/tensor.hpp"

namespace msed {

enum class Padding { kSame, kValid };

/// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormStats {
  std::vector<T> mean;
  std::vector<T> var;

  explicit BatchNormStats(std::size_t channels = 0) : mean(channels, T(0)), var(channels, T(1)) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;

/// 2-D cross-correlation over NCHW input with FCkhkw weights.
///
/// "same" padding follows the usual convention: total padding
/// max((ceil(H/stride) - 1) * stride + kh - H, 0), split evenly with the odd
/// pixel on the bottom/right. `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, std::size_t stride,
                 Padding padding);

/// Batch normalization over axis 1 of a rank-2 [N,C] or rank-4 [N,C,H,W]
/// input. Training mode normalizes with biased batch statistics and updates
/// `stats` as running = momentum * running + (1 - momentum) * batch.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     double momentum, bool training, double epsilon = kBatchNormEpsilon);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Identity activation; returns the input handle unchanged.
template <typename T>
Tensor<T> linear(const Tensor<T>& x) {
  return x;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t window, std::size_t stride);
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

/// input[N,D] x weights[D,U] + bias[U].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

/// Concatenates along axis 1; all other dims must match. Output order is [a | b].
template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b);
/// Channels [begin, end) of axis 1.
template <typename T>
Tensor<T> slice(const Tensor<T>& input, std::size_t begin, std::size_t end);

/// x[N,C,H,W] scaled by s[N,C] per channel.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> square(const Tensor<T>& x);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// True when every element is finite.
template <typename T>
bool all_finite(const Tensor<T>& x);

}  // namespace msed
