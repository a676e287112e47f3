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

#include <doctest.h>

#include <cmath>
#include <random>

#include "msed/ops.hpp"
#include "msed/optim.hpp"

using namespace msed;

namespace {

ParameterList<double> single(Tensor<double> w, bool kernel = true) { return {{"w", w, kernel}}; }

void set_grad(Tensor<double>& w, double g) {
  w.zero_grad();
  if (!w.has_grad()) {
    // Populate the buffer through a trivial backward.
    sum(w).backward();
  }
  for (auto& v : w.grad()) v = g;
}

}  // namespace

TEST_CASE("he normal init") {
  std::mt19937_64 rng(1);
  auto t = he_normal_init<double>({100000}, 2, rng);
  double mean = 0, sq = 0;
  for (double v : t.data()) mean += v;
  mean /= 1e5;
  for (double v : t.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / 1e5);
  CHECK(std::abs(sd - 1.0) < 0.05);
  CHECK(std::abs(mean) < 3.0 * 1.0 / std::sqrt(1e5));

  std::mt19937_64 a(42), b(42);
  auto x = he_normal_init<float>({3, 4}, 12, a), y = he_normal_init<float>({3, 4}, 12, b);
  CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  CHECK_THROWS_AS(he_normal_init<float>({2}, 0, a), std::invalid_argument);
}

TEST_CASE("sgd") {
  SUBCASE("plain gradient step") {
    Tensor<double> w({2}, {1.0, -1.0}, true);
    Sgd<double> opt(single(w), {0.1, 0.0, 0.0});
    set_grad(w, 0.5);
    opt.step();
    CHECK(w[0] == doctest::Approx(1.0 - 0.05));
    CHECK(w[1] == doctest::Approx(-1.0 - 0.05));
  }
  SUBCASE("zero gradient leaves parameters alone") {
    Tensor<double> w({2}, {1.0, -1.0}, true);
    Sgd<double> opt(single(w), {0.1, 0.7, 0.0});
    set_grad(w, 0.0);
    opt.step();
    CHECK(w[0] == 1.0);
    CHECK(w[1] == -1.0);
  }
  SUBCASE("momentum recurrence") {
    Tensor<double> w({1}, std::vector<double>{0.0}, true);
    Sgd<double> opt(single(w), {0.01, 0.7, 0.0});
    set_grad(w, 2.0);
    opt.step();
    const double after_one = w[0];
    CHECK(after_one == doctest::Approx(-0.01 * 2.0));
    set_grad(w, 2.0);
    opt.step();
    CHECK(w[0] - after_one == doctest::Approx(-0.01 * 2.0 * 1.7));
  }
  SUBCASE("weight decay shrinks kernels only") {
    Tensor<double> w({1}, std::vector<double>{2.0}, true), b({1}, std::vector<double>{2.0}, true);
    Sgd<double> opt({{"w", w, true}, {"b", b, false}}, {0.1, 0.0, 1e-2});
    set_grad(w, 0.0);
    set_grad(b, 0.0);
    opt.step();
    CHECK(w[0] == doctest::Approx(2.0 * (1 - 0.1 * 1e-2)));
    CHECK(b[0] == 2.0);
  }
  SUBCASE("missing gradient") {
    Tensor<double> w({1}, std::vector<double>{2.0}, true);
    Sgd<double> opt(single(w), {});
    CHECK_THROWS_AS(opt.step(), std::logic_error);
  }
}

TEST_CASE("adam") {
  SUBCASE("first step moves by lr") {
    Tensor<double> w({1}, std::vector<double>{0.5}, true);
    Adam<double> opt(single(w), {0.001, 0.9, 0.999, 1e-8, 0.0});
    set_grad(w, 1.0);
    opt.step();
    CHECK(w[0] - 0.5 == doctest::Approx(-0.001).epsilon(1e-6));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("zero gradient no change") {
    Tensor<double> w({1}, std::vector<double>{0.5}, true);
    Adam<double> opt(single(w), {0.001, 0.9, 0.999, 1e-8, 0.0});
    set_grad(w, 0.0);
    opt.step();
    CHECK(w[0] == 0.5);
  }
  SUBCASE("worst-case bound for arbitrary gradients") {
    // |step| <= lr * (1 - beta1) / sqrt(1 - beta2) for any gradient sequence.
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> g(-1e3, 1e3);
    Tensor<double> w({8}, std::vector<double>(8, 0.0), true);
    Adam<double> opt(single(w), {0.001, 0.9, 0.999, 1e-8, 0.0});
    const double bound = 0.001 * 0.1 / std::sqrt(0.001);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> before(w.data().begin(), w.data().end());
      set_grad(w, 0.0);
      for (auto& v : w.grad()) v = g(rng);
      opt.step();
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(w[k] - before[k]) <= bound * (1 + 1e-9));
    }
  }
  SUBCASE("quadratic descends monotonically") {
    Tensor<double> w({1}, std::vector<double>{1.0}, true);
    Adam<double> opt(single(w), {0.001, 0.9, 0.999, 1e-8, 0.0});
    double prev = w[0];
    for (int i = 0; i < 10; ++i) {
      opt.zero_grad();
      auto loss = mul(Tensor<double>({1}, std::vector<double>{0.5}), square(w));
      sum(loss).backward();
      opt.step();
      CHECK(w[0] < prev);
      prev = w[0];
    }
  }
  SUBCASE("step magnitude bounded by lr for steady gradients of any scale") {
    // Steady gradients with 10% jitter: |m_hat / sqrt(v_hat)| stays within a
    // few percent of 1 regardless of scale.
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0, 1);
    for (double scale : {1e-3, 1.0, 1e4}) {
      Tensor<double> w({4}, {0, 0, 0, 0}, true);
      Adam<double> opt(single(w), {0.001, 0.9, 0.999, 1e-8, 0.0});
      for (int i = 0; i < 100; ++i) {
        std::vector<double> before(w.data().begin(), w.data().end());
        set_grad(w, 0.0);
        for (auto& v : w.grad()) v = scale * (1.0 + 0.1 * g(rng));
        opt.step();
        for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(w[k] - before[k]) <= 0.001 * 1.05);
      }
    }
  }
}

TEST_CASE("schedules follow the three-phase timeline") {
  const auto cls = LrSchedule::classification();
  auto at = [&](int e) { return cls.at(e, {}); };
  CHECK(at(1).lr == 0.001);
  CHECK(*at(1).momentum == 0.7);
  CHECK(at(150).lr == 0.001);
  CHECK(at(151).lr == 0.0001);
  CHECK(*at(151).momentum == 0.7);
  CHECK(at(200).lr == 0.0001);
  CHECK(at(201).lr == 0.00001);
  CHECK(*at(201).momentum == 0.5);
  CHECK(at(250).lr == 0.00001);
  CHECK_THROWS_AS(cls.at(0, {}), std::invalid_argument);

  const auto fusion = LrSchedule::fusion();
  const std::vector<double> flat{1.0, 1.0, 1.0, 1.0, 1.0};
  auto v = fusion.at(6, flat);
  CHECK(v.plateau_reductions == 1);
  CHECK(v.lr == doctest::Approx(0.0001));
  CHECK(fusion.at(5, std::span(flat).first(4)).lr == 0.001);

  const std::vector<double> improving{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3};
  CHECK(fusion.at(9, improving).lr == 0.001);

  // Wait counter resets after a reduction.
  const std::vector<double> long_flat(9, 1.0);
  CHECK(plateau_reductions(long_flat, {4, 0.1}) == 2);

  CHECK(LrSchedule::regression().at(50, improving).lr == 0.001);

  LrSchedule bad;
  bad.steps = {{10, 0.1, {}}, {10, 0.01, {}}};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
