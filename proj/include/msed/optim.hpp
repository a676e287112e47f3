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

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "msed/parameter.hpp"
#include "msed/tensor.hpp"

namespace msed {

/// Samples N(0, 2 / fan_in) into a tensor of `shape`.
template <typename T>
Tensor<T> he_normal_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng, bool requires_grad = true);

inline constexpr double kDefaultL2 = 1e-4;

struct SgdConfig {
  double lr = 0.001;
  double momentum = 0.7;
  double l2 = kDefaultL2;
};

/// Classic momentum SGD: v <- mu*v - lr*(g + l2*w), w <- w + v.
template <typename T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, SgdConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  void set_momentum(double momentum) { config_.momentum = momentum; }
  const SgdConfig& config() const { return config_; }
  const ParameterList<T>& params() const { return params_; }
  std::vector<std::vector<T>>& velocity() { return velocity_; }
  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  ParameterList<T> params_;
  SgdConfig config_;
  std::vector<std::vector<T>> velocity_;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double l2 = kDefaultL2;
};

/// Bias-corrected Adam; L2 is folded into the gradient before the moments.
template <typename T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamConfig config);

  void step();
  void zero_grad();
  void set_lr(double lr) { config_.lr = lr; }
  const AdamConfig& config() const { return config_; }
  const ParameterList<T>& params() const { return params_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<std::vector<T>>& first_moment() { return m_; }
  std::vector<std::vector<T>>& second_moment() { return v_; }

 private:
  ParameterList<T> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

struct StepRule {
  int after_epoch;  // takes effect from epoch after_epoch + 1
  double lr;
  std::optional<double> momentum;
};

struct PlateauRule {
  int patience = 4;
  double factor = 0.1;
};

struct ScheduleValues {
  double lr;
  std::optional<double> momentum;
  int plateau_reductions = 0;
};

/// Learning-rate timeline: step thresholds on the epoch number, optionally
/// scaled by a reduce-on-plateau rule over the validation-loss history.
/// Pure: the same (epoch, history) always yields the same values.
struct LrSchedule {
  double base_lr = 0.001;
  std::optional<double> base_momentum;
  std::vector<StepRule> steps;
  std::optional<PlateauRule> plateau;

  /// Values in force during `epoch` (1-based), given validation losses of
  /// the epochs completed before it.
  ScheduleValues at(int epoch, std::span<const double> val_loss_history) const;
  void validate() const;

  /// SGD timeline for the classification backbone.
  static LrSchedule classification();
  /// Flat Adam schedule for the regression backbone.
  static LrSchedule regression();
  /// Adam with reduce-on-plateau for the fusion classifier.
  static LrSchedule fusion();
};

/// Number of plateau reductions triggered by `history` (Keras-style:
/// a reduction fires after `patience` epochs without improvement, then the
/// wait counter resets).
int plateau_reductions(std::span<const double> history, const PlateauRule& rule);

extern template class Sgd<float>;
extern template class Sgd<double>;
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace msed
