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
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msed/ops.hpp"
#include "msed/parameter.hpp"
#include "msed/tensor.hpp"

namespace msed {

enum class HeadKind { kClassification, kRegression };

const char* head_name(HeadKind head);
HeadKind parse_head(const std::string& name);

/// Architecture hyperparameters of the SE-DenseNet backbone.
struct NetworkSpec {
  int growth_rate = 18;
  int modules_per_block = 16;
  int dense_blocks = 5;
  double compression = 0.5;
  int se_ratio = 16;
  std::size_t input_h = 299;
  std::size_t input_w = 299;
  std::size_t input_c = 3;
  int num_classes = 5;
  HeadKind head = HeadKind::kClassification;

  static NetworkSpec paper();
  static NetworkSpec desk();

  void validate() const;
  /// 2 * growth_rate; the stem width.
  std::size_t stem_filters() const;
  /// 2 * growth_rate * compression, the width every SE-dense module adds.
  std::size_t filters_per_module() const;
  std::size_t transition_channels(std::size_t in_channels) const;
  /// Smallest square input that survives dense_blocks - 1 halvings.
  std::size_t min_input_size() const;
  std::size_t output_units() const { return head == HeadKind::kClassification ? num_classes : 1; }

  std::map<std::string, std::string> to_map() const;
  static NetworkSpec from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const NetworkSpec&) const = default;
};

/// Channel counts at each block boundary, computed from the spec alone.
struct ChannelPlan {
  std::size_t stem = 0;
  std::vector<std::size_t> block_out;
  std::vector<std::size_t> transition_out;
  std::size_t feature_dim = 0;

  /// stem, block0, trans0, block1, ..., last block.
  std::vector<std::size_t> boundary_sequence() const;
};

ChannelPlan plan_channels(const NetworkSpec& spec);

/// max(1, floor(channels / ratio)).
std::size_t se_reduced_channels(std::size_t channels, int ratio);

/// Thread-local observer called with every named layer output. Used to
/// locate the first layer that produces a non-finite value.
template <typename T>
using LayerProbe = std::function<void(const std::string&, const Tensor<T>&)>;

template <typename T>
class ProbeScope {
 public:
  explicit ProbeScope(LayerProbe<T> probe);
  ~ProbeScope();
  ProbeScope(const ProbeScope&) = delete;
  ProbeScope& operator=(const ProbeScope&) = delete;

 private:
  LayerProbe<T> previous_;
};

template <typename T>
void emit_probe(const std::string& name, const Tensor<T>& t);

template <typename T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(std::string name, std::size_t in_channels, std::size_t filters, std::size_t kernel, bool with_bias,
              std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void parameters(ParameterList<T>& out) const;
  std::size_t filters() const { return weight_.dim(0); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  std::string name_;
  Tensor<T> weight_, bias_;
};

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(std::string name, std::size_t channels, double momentum = 0.9);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void parameters(ParameterList<T>& out) const;
  void buffers(BufferList<T>& out);

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  BatchNormStats<T>& stats() { return stats_; }

 private:
  std::string name_;
  Tensor<T> gamma_, beta_;
  BatchNormStats<T> stats_;
  double momentum_ = 0.9;
};

template <typename T>
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::string name, std::size_t in_features, std::size_t units, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void parameters(ParameterList<T>& out) const;
  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t units() const { return weight_.dim(1); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  std::string name_;
  Tensor<T> weight_, bias_;
};

/// Squeeze-excitation: channel gates s = sigmoid(W2 relu(W1 GAP(x))) scale x.
/// The two 1x1 convolutions act on a 1x1 map and are stored as dense layers.
template <typename T>
class SeBlock {
 public:
  SeBlock() = default;
  SeBlock(std::string name, std::size_t channels, int ratio, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  /// The gate values alone, [N,C].
  Tensor<T> gates(const Tensor<T>& x) const;
  void parameters(ParameterList<T>& out) const;
  std::size_t reduced_channels() const { return reduce_.units(); }

  DenseLayer<T>& reduce() { return reduce_; }
  DenseLayer<T>& expand() { return expand_; }

 private:
  std::string name_;
  DenseLayer<T> reduce_, expand_;
};

/// BN -> ReLU -> 3x3 conv -> SE, concatenated after the module input.
template <typename T>
class SeDenseModule {
 public:
  SeDenseModule(std::string name, std::size_t in_channels, std::size_t filters, int se_ratio, std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void parameters(ParameterList<T>& out) const;
  void buffers(BufferList<T>& out);
  std::size_t out_channels() const { return in_channels_ + conv_.filters(); }

 private:
  std::string name_;
  std::size_t in_channels_;
  BatchNormLayer<T> bn_;
  Conv2dLayer<T> conv_;
  SeBlock<T> se_;
};

template <typename T>
class DenseBlock {
 public:
  DenseBlock(std::string name, std::size_t in_channels, std::size_t modules, std::size_t filters, int se_ratio,
             std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void parameters(ParameterList<T>& out) const;
  void buffers(BufferList<T>& out);
  std::size_t out_channels() const { return out_channels_; }

 private:
  std::string name_;
  std::vector<SeDenseModule<T>> modules_;
  std::size_t out_channels_;
};

/// BN -> ReLU -> 1x1 conv to floor(C*theta) -> SE -> 2x2 average pool.
template <typename T>
class TransitionBlock {
 public:
  TransitionBlock(std::string name, std::size_t in_channels, std::size_t out_channels, int se_ratio,
                  std::mt19937_64& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void parameters(ParameterList<T>& out) const;
  void buffers(BufferList<T>& out);
  std::size_t out_channels() const { return conv_.filters(); }

 private:
  std::string name_;
  BatchNormLayer<T> bn_;
  Conv2dLayer<T> conv_;
  SeBlock<T> se_;
};

template <typename T>
struct BackboneOutput {
  Tensor<T> features;  // last global-average-pool output, [N, feature_dim]
  Tensor<T> output;    // logits [N, M] (classification) or severity [N, 1] (regression)
};

/// Stem conv, dense/transition stack, BN-ReLU, global pool and a linear
/// projection head. Classification heads return logits; apply softmax() for
/// probabilities.
template <typename T>
class SeDenseNet {
 public:
  SeDenseNet(const NetworkSpec& spec, std::mt19937_64& rng);

  BackboneOutput<T> forward(const Tensor<T>& x, bool training);
  /// Softmax probabilities (classification) or raw severity (regression).
  Tensor<T> predict(const Tensor<T>& x);

  ParameterList<T> parameters() const;
  BufferList<T> buffers();
  const NetworkSpec& spec() const { return spec_; }
  std::size_t feature_dim() const { return head_.in_features(); }
  std::size_t parameter_count() const;

 private:
  NetworkSpec spec_;
  Conv2dLayer<T> stem_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<TransitionBlock<T>> transitions_;
  BatchNormLayer<T> final_bn_;
  DenseLayer<T> head_;
};

/// Builds a backbone; rejects inputs too small for the transition halvings.
template <typename T>
SeDenseNet<T> build_sedensenet(const NetworkSpec& spec, std::mt19937_64& rng);

inline constexpr std::size_t kFusionHiddenUnits = 512;

/// concat(cls, reg) -> BN(0.9) -> dense(512, ReLU) -> dense(M) logits.
template <typename T>
class FusionMlp {
 public:
  FusionMlp(std::size_t cls_feature_dim, std::size_t reg_feature_dim, int num_classes, std::mt19937_64& rng,
            std::size_t hidden = kFusionHiddenUnits);

  Tensor<T> forward(const Tensor<T>& cls_features, const Tensor<T>& reg_features, bool training);
  ParameterList<T> parameters() const;
  BufferList<T> buffers();
  std::size_t input_dim() const { return cls_dim_ + reg_dim_; }
  std::size_t cls_dim() const { return cls_dim_; }
  std::size_t reg_dim() const { return reg_dim_; }

 private:
  std::size_t cls_dim_, reg_dim_;
  BatchNormLayer<T> bn_;
  DenseLayer<T> hidden_, out_;
};

template <typename T>
FusionMlp<T> build_fusion_mlp(std::size_t cls_feature_dim, std::size_t reg_feature_dim, int num_classes,
                              std::mt19937_64& rng);

// Losses.

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

inline constexpr double kProbabilityClamp = 1e-7;

/// Batch mean of -sum_i w_class * y_i * log(p_i), with p clamped to
/// [1e-7, 1 - 1e-7]. `class_weights` may be empty (unweighted).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const Tensor<T>& onehot, std::span<const double> class_weights = {});

/// Mean squared error over all elements.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, int num_classes);

}  // namespace msed
