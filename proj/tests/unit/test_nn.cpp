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

#include "gradcheck.hpp"
#include "msed/nn.hpp"

using namespace msed;
using msed::testing::gradcheck;
using msed::testing::random_tensor;

namespace {

Tensor<double> weighted_sum(const Tensor<double>& y, const Tensor<double>& coeffs) { return sum(mul(y, coeffs)); }

NetworkSpec tiny_desk(std::size_t size = 8) {
  auto s = NetworkSpec::desk();
  s.input_h = s.input_w = size;
  return s;
}

}  // namespace

TEST_CASE("softmax") {
  auto p = softmax(Tensor<double>({1, 5}));
  for (double v : p.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  auto q = softmax(Tensor<double>({1, 2}, {std::log(2.0), 0.0}));
  CHECK(q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(q[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  auto big = softmax(Tensor<float>({1, 2}, {1000.0f, 0.0f}));
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] == doctest::Approx(0.0));

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    auto z = random_tensor({3, 5}, rng, -20, 20);
    auto shifted = z.clone();
    for (auto& v : shifted.data()) v += 13.5;
    auto a = softmax(z), b = softmax(shifted);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        s += a[r * 5 + j];
        CHECK(std::abs(a[r * 5 + j] - b[r * 5 + j]) < 1e-6);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("cross_entropy") {
  const std::vector<int> labels{3};
  auto y = one_hot<double>(labels, 5);
  SUBCASE("perfect prediction") {
    CHECK(cross_entropy(y.clone(), y).item() <= 1e-6);
  }
  SUBCASE("uniform prediction") {
    CHECK(cross_entropy(Tensor<double>::full({1, 5}, 0.2), y).item() == doctest::Approx(-std::log(0.2)));
  }
  SUBCASE("class weighted") {
    // w_3 from inverse class frequency on 1805/370/999/193/295.
    const std::vector<double> w{3662.0 / (5 * 1805), 3662.0 / (5 * 370), 3662.0 / (5 * 999), 3662.0 / (5 * 193),
                                3662.0 / (5 * 295)};
    const double loss = cross_entropy(Tensor<double>::full({1, 5}, 0.2), y, w).item();
    CHECK(loss == doctest::Approx(3.7948 * 1.6094).epsilon(1e-3));
    CHECK(loss == doctest::Approx(6.108).epsilon(1e-3));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(cross_entropy(Tensor<double>({2, 5}), y), std::invalid_argument);
  }
  SUBCASE("softmax then cross entropy gives p - y on the logits") {
    std::mt19937_64 rng(2);
    const std::vector<int> many{0, 4, 2};
    auto onehot = one_hot<double>(many, 5);
    for (int trial = 0; trial < 20; ++trial) {
      auto z = random_tensor({3, 5}, rng, -3, 3);
      z.set_requires_grad(true);
      cross_entropy(softmax(z), onehot).backward();
      auto p = softmax(z);
      for (std::size_t k = 0; k < 15; ++k) CHECK(std::abs(z.grad()[k] - (p[k] - onehot[k]) / 3.0) < 1e-6);
    }
  }
}

TEST_CASE("mse") {
  CHECK(mse(Tensor<double>({1, 1}, std::vector<double>{0.4}), Tensor<double>({1, 1}, std::vector<double>{0.4})).item() == 0.0);
  CHECK(mse(Tensor<double>({1, 1}, std::vector<double>{0.4}), Tensor<double>({1, 1}, std::vector<double>{0.2})).item() == doctest::Approx(0.04));
  CHECK(mse(Tensor<double>({2, 1}, {0.0, 0.8}), Tensor<double>({2, 1}, {0.2, 0.2})).item() == doctest::Approx(0.2));
  CHECK_THROWS_AS(mse(Tensor<double>({2, 1}), Tensor<double>({1, 1})), std::invalid_argument);
}

TEST_CASE("se block") {
  std::mt19937_64 rng(3);
  CHECK(se_reduced_channels(18, 16) == 1);
  CHECK(se_reduced_channels(36, 16) == 2);
  CHECK(se_reduced_channels(3, 4) == 1);

  SUBCASE("saturated gates pass the input through") {
    SeBlock<double> se("se", 4, 2, rng);
    for (auto& v : se.expand().bias().data()) v = 1000.0;
    auto x = random_tensor({2, 4, 3, 3}, rng);
    auto y = se.forward(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("constant channels stay constant") {
    SeBlock<double> se("se", 3, 1, rng);
    Tensor<double> x({1, 3, 4, 4});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) x[c * 16 + i] = static_cast<double>(c) + 1.5;
    auto y = se.forward(x);
    auto s = se.gates(x);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) CHECK(y[c * 16 + i] == doctest::Approx((c + 1.5) * s[c]));
  }
  SUBCASE("gates shrink magnitudes") {
    SeBlock<double> se("se", 6, 2, rng);
    auto x = random_tensor({2, 6, 3, 3}, rng, -5, 5);
    auto y = se.forward(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::abs(y[i]) <= std::abs(x[i]));
  }
  SUBCASE("gradient vs finite differences") {
    SeBlock<double> se("se", 6, 2, rng);
    auto x = random_tensor({2, 6, 3, 3}, rng);
    auto coeffs = random_tensor({2, 6, 3, 3}, rng);
    std::vector<Tensor<double>> inputs{x};
    ParameterList<double> params;
    se.parameters(params);
    for (auto& p : params) inputs.push_back(p.value);
    CHECK(gradcheck([&] { return weighted_sum(se.forward(x), coeffs); }, inputs).max_rel_error < 1e-5);
  }
}

TEST_CASE("se dense module") {
  std::mt19937_64 rng(4);
  auto spec = NetworkSpec::paper();
  CHECK(spec.filters_per_module() == 18);
  SeDenseModule<double> m("m", 36, spec.filters_per_module(), spec.se_ratio, rng);
  auto x = random_tensor({2, 36, 3, 3}, rng);
  auto y = m.forward(x, true);
  CHECK(y.shape() == Shape{2, 54, 3, 3});
  // The first C channels are the untouched input.
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 36 * 9; ++i) CHECK(y[n * 54 * 9 + i] == x[n * 36 * 9 + i]);

  SUBCASE("gradient vs finite differences") {
    SeDenseModule<double> small("m", 4, 3, 2, rng);
    auto xs = random_tensor({2, 4, 4, 4}, rng);
    auto coeffs = random_tensor({2, 7, 4, 4}, rng);
    std::vector<Tensor<double>> inputs{xs};
    ParameterList<double> params;
    small.parameters(params);
    for (auto& p : params) inputs.push_back(p.value);
    CHECK(gradcheck([&] { return weighted_sum(small.forward(xs, true), coeffs); }, inputs).max_rel_error < 1e-5);
  }
}

TEST_CASE("dense block channel arithmetic") {
  std::mt19937_64 rng(5);
  SUBCASE("full-size block") {
    DenseBlock<float> block("b", 36, 16, 18, 16, rng);
    CHECK(block.out_channels() == 324);
    NoGradGuard guard;
    CHECK(block.forward(Tensor<float>({1, 36, 2, 2}), false).dim(1) == 324);
  }
  SUBCASE("desk block") {
    DenseBlock<double> block("b", 12, 2, 6, 4, rng);
    auto x = random_tensor({2, 12, 4, 4}, rng);
    auto y = block.forward(x, true);
    CHECK(y.dim(1) == 24);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 12 * 16; ++i) CHECK(y[n * 24 * 16 + i] == x[n * 12 * 16 + i]);
  }
  SUBCASE("single-module block equals the module") {
    std::mt19937_64 r1(9), r2(9);
    DenseBlock<double> block("b", 5, 1, 3, 2, r1);
    SeDenseModule<double> module("b.m0", 5, 3, 2, r2);
    auto x = random_tensor({2, 5, 3, 3}, rng);
    auto a = block.forward(x, true), b = module.forward(x, true);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
}

TEST_CASE("transition block") {
  std::mt19937_64 rng(6);
  auto spec = NetworkSpec::paper();
  CHECK(spec.transition_channels(324) == 162);
  CHECK(spec.transition_channels(513) == 256);
  TransitionBlock<float> t("t", 324, spec.transition_channels(324), 16, rng);
  NoGradGuard guard;
  auto y = t.forward(Tensor<float>({1, 324, 4, 6}), false);
  CHECK(y.shape() == Shape{1, 162, 2, 3});

  auto full = NetworkSpec::paper();
  full.compression = 1.0;
  CHECK(full.transition_channels(40) == 40);
  TransitionBlock<float> odd("t", 8, 8, 4, rng);
  CHECK(odd.forward(Tensor<float>({1, 8, 7, 7}), false).shape() == Shape{1, 8, 3, 3});
  CHECK_THROWS_AS(odd.forward(Tensor<float>({1, 8, 1, 4}), false), std::invalid_argument);
}

TEST_CASE("transition block gradient") {
  std::mt19937_64 rng(7);
  TransitionBlock<double> t("t", 6, 3, 2, rng);
  auto x = random_tensor({2, 6, 4, 4}, rng);
  auto coeffs = random_tensor({2, 3, 2, 2}, rng);
  std::vector<Tensor<double>> inputs{x};
  ParameterList<double> params;
  t.parameters(params);
  for (auto& p : params) inputs.push_back(p.value);
  CHECK(gradcheck([&] { return weighted_sum(t.forward(x, true), coeffs); }, inputs).max_rel_error < 1e-5);
}

TEST_CASE("network builder") {
  SUBCASE("full-size channel plan") {
    auto plan = plan_channels(NetworkSpec::paper());
    CHECK(plan.boundary_sequence() == std::vector<std::size_t>{36, 324, 162, 450, 225, 513, 256, 544, 272, 560});
    CHECK(plan.feature_dim == 560);
  }
  SUBCASE("desk channel plan") {
    auto plan = plan_channels(NetworkSpec::desk());
    CHECK(plan.boundary_sequence() == std::vector<std::size_t>{12, 24, 12, 24});
  }
  SUBCASE("forward shapes and softmax head") {
    std::mt19937_64 rng(8);
    auto net = build_sedensenet<float>(NetworkSpec::desk(), rng);
    CHECK(net.feature_dim() == 24);
    std::mt19937_64 drng(1);
    Tensor<float> x({3, 3, 32, 32});
    std::uniform_real_distribution<float> u(0, 1);
    for (auto& v : x.data()) v = u(drng);
    auto out = net.forward(x, true);
    CHECK(out.features.shape() == Shape{3, 24});
    CHECK(out.output.shape() == Shape{3, 5});
    auto p = net.predict(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) s += p[r * 5 + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    auto reg = NetworkSpec::desk();
    reg.head = HeadKind::kRegression;
    auto rnet = build_sedensenet<float>(reg, rng);
    CHECK(rnet.predict(x).shape() == Shape{3, 1});
    CHECK_THROWS_AS(rnet.predict(Tensor<float>({1, 3, 16, 16})), std::invalid_argument);
  }
  SUBCASE("spatial collapse is rejected with the minimum size") {
    auto s = NetworkSpec::paper();
    s.input_h = s.input_w = 8;
    std::mt19937_64 rng(1);
    try {
      build_sedensenet<float>(s, rng);
      FAIL("expected rejection");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("minimum input size is 16x16") != std::string::npos);
    }
  }
  SUBCASE("invalid specs") {
    auto s = NetworkSpec::desk();
    s.compression = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s = NetworkSpec::desk();
    s.growth_rate = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  }
  SUBCASE("spec map round trip") {
    auto s = NetworkSpec::desk();
    s.head = HeadKind::kRegression;
    s.compression = 0.37;
    CHECK(NetworkSpec::from_map(s.to_map()) == s);
  }
}

TEST_CASE("fusion mlp") {
  std::mt19937_64 rng(9);
  auto paper = plan_channels(NetworkSpec::paper());
  FusionMlp<float> big(paper.feature_dim, paper.feature_dim, 5, rng);
  CHECK(big.input_dim() == 1120);
  auto mlp = build_fusion_mlp<double>(24, 24, 5, rng);
  CHECK(mlp.input_dim() == 48);
  auto a = random_tensor({4, 24}, rng), b = random_tensor({4, 24}, rng);
  auto p = softmax(mlp.forward(a, b, true));
  CHECK(p.shape() == Shape{4, 5});
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(p[r * 5 + j] >= 0.0);
      s += p[r * 5 + j];
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(mlp.forward(random_tensor({4, 20}, rng), b, true), std::invalid_argument);
}

TEST_CASE("full desk network gradient") {
  std::mt19937_64 rng(10);
  auto net = build_sedensenet<double>(tiny_desk(), rng);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  const std::vector<int> labels{1, 3};
  auto y = one_hot<double>(labels, 5);
  std::vector<Tensor<double>> inputs{x};
  for (auto& p : net.parameters()) inputs.push_back(p.value);
  auto res = gradcheck([&] { return cross_entropy(softmax(net.forward(x, true).output), y); }, inputs);
  MESSAGE("checked " << res.checked << " entries, max rel err " << res.max_rel_error);
  CHECK(res.max_rel_error < 1e-4);
}
