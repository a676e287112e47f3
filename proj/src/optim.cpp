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

#include "msed/optim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace msed {

template <typename T>
Tensor<T> he_normal_init(const Shape& shape, std::size_t fan_in, std::mt19937_64& rng, bool requires_grad) {
  if (fan_in < 1) throw std::invalid_argument("he_normal_init: fan_in must be >= 1");
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(shape, requires_grad);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

namespace {

template <typename T>
const std::span<T> checked_grad(Parameter<T>& p) {
  if (!p.value.has_grad()) throw std::logic_error("optimizer step: parameter '" + p.name + "' has no gradient");
  return p.value.grad();
}

template <typename T>
std::vector<std::vector<T>> zeros_like(const ParameterList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.value.numel(), T(0));
  return out;
}

}  // namespace

template <typename T>
Sgd<T>::Sgd(ParameterList<T> params, SgdConfig config)
    : params_(std::move(params)), config_(config), velocity_(zeros_like(params_)) {
  if (config_.momentum < 0 || config_.momentum >= 1) throw std::invalid_argument("sgd: momentum must be in [0,1)");
}

template <typename T>
void Sgd<T>::step() {
  const T lr = static_cast<T>(config_.lr), mu = static_cast<T>(config_.momentum);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto g = checked_grad(p);
    auto w = p.value.data();
    auto& v = velocity_[i];
    const T l2 = p.is_kernel ? static_cast<T>(config_.l2) : T(0);
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu * v[k] - lr * (g[k] + l2 * w[k]);
      w[k] += v[k];
    }
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
Adam<T>::Adam(ParameterList<T> params, AdamConfig config)
    : params_(std::move(params)), config_(config), m_(zeros_like(params_)), v_(zeros_like(params_)) {}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto g = checked_grad(p);
    auto w = p.value.data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double l2 = p.is_kernel ? config_.l2 : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]) + l2 * static_cast<double>(w[k]);
      m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * gk);
      v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * gk * gk);
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] = static_cast<T>(w[k] - config_.lr * mhat / (std::sqrt(vhat) + config_.epsilon));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

int plateau_reductions(std::span<const double> history, const PlateauRule& rule) {
  double best = std::numeric_limits<double>::infinity();
  int wait = 0, reductions = 0;
  for (double loss : history) {
    if (loss < best) {
      best = loss;
      wait = 0;
      continue;
    }
    if (++wait >= rule.patience) {
      ++reductions;
      wait = 0;
    }
  }
  return reductions;
}

ScheduleValues LrSchedule::at(int epoch, std::span<const double> val_loss_history) const {
  if (epoch < 1) throw std::invalid_argument("schedule: epoch must be >= 1");
  ScheduleValues out{base_lr, base_momentum, 0};
  for (const auto& rule : steps) {
    if (epoch > rule.after_epoch) {
      out.lr = rule.lr;
      if (rule.momentum) out.momentum = rule.momentum;
    }
  }
  if (plateau) {
    out.plateau_reductions = plateau_reductions(val_loss_history, *plateau);
    out.lr *= std::pow(plateau->factor, out.plateau_reductions);
  }
  return out;
}

void LrSchedule::validate() const {
  if (!(base_lr > 0)) throw std::invalid_argument("schedule: base lr must be positive");
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i].after_epoch <= steps[i - 1].after_epoch)
      throw std::invalid_argument("schedule: step thresholds must be strictly increasing");
  if (plateau && (plateau->patience < 1 || !(plateau->factor > 0 && plateau->factor < 1)))
    throw std::invalid_argument("schedule: plateau needs patience >= 1 and factor in (0,1)");
}

LrSchedule LrSchedule::classification() {
  LrSchedule s;
  s.base_lr = 0.001;
  s.base_momentum = 0.7;
  s.steps = {{150, 0.0001, std::nullopt}, {200, 0.00001, 0.5}};
  return s;
}

LrSchedule LrSchedule::regression() {
  LrSchedule s;
  s.base_lr = 0.001;
  return s;
}

LrSchedule LrSchedule::fusion() {
  LrSchedule s;
  s.base_lr = 0.001;
  s.plateau = PlateauRule{4, 0.1};
  return s;
}

template Tensor<float> he_normal_init<float>(const Shape&, std::size_t, std::mt19937_64&, bool);
template Tensor<double> he_normal_init<double>(const Shape&, std::size_t, std::mt19937_64&, bool);
template class Sgd<float>;
template class Sgd<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace msed
