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
#include "msed/ops.hpp"
#include "msed/tensor.hpp"

using namespace msed;
using msed::testing::gradcheck;
using msed::testing::random_tensor;

namespace {

// Weighted sum with fixed random coefficients; avoids the degenerate zero
// gradients of a plain sum through normalization layers.
Tensor<double> weighted_sum(const Tensor<double>& y, const Tensor<double>& coeffs) { return sum(mul(y, coeffs)); }

}  // namespace

TEST_CASE("tensor construction and invariants") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
  auto c = t.clone();
  c[0] = 5;
  CHECK(t[0] == 0);
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    Tensor<double> x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares") {
    Tensor<double> x({2}, {1, -2}, true);
    sum(square(x)).backward();
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == -4.0);
  }
  SUBCASE("repeated backward accumulates leaf gradients") {
    Tensor<double> x({2}, {1, -2}, true);
    auto loss = sum(square(x));
    loss.backward();
    loss.backward();
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == -8.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor<double> x({2}, {1, 2}, true);
    CHECK_THROWS_AS(square(x).backward(), std::invalid_argument);
  }
  SUBCASE("no-grad guard records nothing") {
    Tensor<double> x({2}, {1, 2}, true);
    NoGradGuard guard;
    CHECK_FALSE(square(x).requires_grad());
  }
}

TEST_CASE("conv2d") {
  SUBCASE("identity kernel") {
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
    auto y = conv2d(x, w, Tensor<float>(), 1, Padding::kValid);
    CHECK(y.shape() == x.shape());
    for (float v : y.data()) CHECK(v == 1.0f);
  }
  SUBCASE("valid shape formula") {
    auto y = conv2d(Tensor<float>({1, 1, 4, 4}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 1, Padding::kValid);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
  }
  SUBCASE("same padding keeps spatial dims for odd kernels") {
    for (std::size_t k : {1u, 3u, 5u}) {
      auto y = conv2d(Tensor<float>({2, 2, 7, 6}), Tensor<float>({3, 2, k, k}), Tensor<float>(), 1, Padding::kSame);
      CHECK(y.shape() == Shape{2, 3, 7, 6});
    }
  }
  SUBCASE("same padding puts the odd pixel bottom/right") {
    // 2x2 kernel on 3x3 with stride 1: one pad row/col, placed after the data.
    Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto y = conv2d(x, Tensor<double>::full({1, 1, 2, 2}, 1.0), Tensor<double>(), 1, Padding::kSame);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y[0] == 12.0);  // 1+2+4+5
    CHECK(y[8] == 9.0);   // bottom-right sees only itself
  }
  SUBCASE("stride") {
    auto y = conv2d(Tensor<float>({1, 1, 5, 5}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 2, Padding::kValid);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(conv2d(Tensor<float>({1, 2, 4, 4}), Tensor<float>({1, 3, 3, 3}), Tensor<float>(), 1, Padding::kValid),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor<float>({1, 1, 4, 4}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 0, Padding::kValid),
                    std::invalid_argument);
    CHECK_THROWS_AS(conv2d(Tensor<float>({1, 1, 2, 2}), Tensor<float>({1, 1, 3, 3}), Tensor<float>(), 1, Padding::kValid),
                    std::invalid_argument);
  }
  SUBCASE("gradient of sum(output) vs finite differences") {
    std::mt19937_64 rng(7);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    auto b = random_tensor({4}, rng);
    for (Padding pad : {Padding::kSame, Padding::kValid}) {
      auto res = gradcheck([&] { return sum(conv2d(x, w, b, 1, pad)); }, {x, w, b});
      CHECK(res.max_rel_error < 1e-5);
    }
    auto strided = gradcheck([&] { return sum(conv2d(x, w, b, 2, Padding::kSame)); }, {x, w, b});
    CHECK(strided.max_rel_error < 1e-5);
  }
}

TEST_CASE("batch_norm") {
  auto gamma = Tensor<double>::full({2}, 1.0);
  SUBCASE("constant input normalizes to zero") {
    auto beta = Tensor<double>::zeros({2});
    BatchNormStats<double> stats(2);
    auto y = batch_norm(Tensor<double>::full({3, 2, 2, 2}, 4.0), gamma, beta, stats, 0.9, true);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-12);
  }
  SUBCASE("beta shifts the per-channel mean") {
    std::mt19937_64 rng(3);
    auto beta = Tensor<double>::full({2}, 5.0);
    BatchNormStats<double> stats(2);
    auto y = batch_norm(random_tensor({4, 2, 3, 3}, rng), gamma, beta, stats, 0.9, true);
    for (std::size_t c = 0; c < 2; ++c) {
      double s = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 9; ++i) s += y[(n * 2 + c) * 9 + i];
      CHECK(s / 36 == doctest::Approx(5.0).epsilon(1e-12));
    }
  }
  SUBCASE("running stats update and inference path") {
    Tensor<double> x({2, 1}, {1.0, 3.0});
    BatchNormStats<double> stats(1);
    auto g1 = Tensor<double>::full({1}, 1.0);
    auto b0 = Tensor<double>::zeros({1});
    batch_norm(x, g1, b0, stats, 0.9, true);
    CHECK(stats.mean[0] == doctest::Approx(0.9 * 0 + 0.1 * 2.0));
    CHECK(stats.var[0] == doctest::Approx(0.9 * 1 + 0.1 * 1.0));
    auto y = batch_norm(x, g1, b0, stats, 0.9, false);
    CHECK(y[0] == doctest::Approx((1.0 - 0.2) / std::sqrt(1.0 + 1e-5)));
  }
  SUBCASE("gradients vs finite differences") {
    std::mt19937_64 rng(11);
    auto x = random_tensor({2, 3, 4, 4}, rng);
    auto ga = random_tensor({3}, rng, 0.5, 1.5);
    auto be = random_tensor({3}, rng);
    auto coeffs = random_tensor({2, 3, 4, 4}, rng);
    BatchNormStats<double> stats(3);
    for (bool training : {true, false}) {
      auto res = gradcheck([&] { return weighted_sum(batch_norm(x, ga, be, stats, 0.9, training), coeffs); },
                           {x, ga, be});
      CHECK(res.max_rel_error < 1e-5);
    }
    auto x2 = random_tensor({5, 3}, rng);
    auto c2 = random_tensor({5, 3}, rng);
    auto res2 = gradcheck([&] { return weighted_sum(batch_norm(x2, ga, be, stats, 0.9, true), c2); }, {x2, ga, be});
    CHECK(res2.max_rel_error < 1e-5);
  }
}

TEST_CASE("activations") {
  Tensor<double> x({3}, {-1, 0, 2}, true);
  auto r = relu(x);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);
  sum(r).backward();
  CHECK(x.grad()[1] == 0.0);  // subgradient at zero
  CHECK(x.grad()[2] == 1.0);
  // A diverged activation must stay visible downstream.
  CHECK(std::isnan(relu(Tensor<double>(Shape{1}, std::vector<double>{std::nan("")}))[0]));

  Tensor<double> z({1}, {0.0}, true);
  auto s = sigmoid(z);
  CHECK(s[0] == 0.5);
  sum(s).backward();
  CHECK(z.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
  auto fd = gradcheck([&] { return sum(sigmoid(z)); }, {z});
  CHECK(fd.max_rel_error < 1e-9);

  auto big = sigmoid(Tensor<double>({2}, {-800, 800}));
  CHECK(std::isfinite(big[0]));
  CHECK(big[1] == 1.0);
  CHECK(linear(x).node() == x.node());

  std::mt19937_64 rng(5);
  auto y = random_tensor({3, 4}, rng);
  auto coeffs = random_tensor({3, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(relu(y), coeffs); }, {y}).max_rel_error < 1e-5);
  CHECK(gradcheck([&] { return weighted_sum(sigmoid(y), coeffs); }, {y}).max_rel_error < 1e-5);
}

TEST_CASE("pooling") {
  SUBCASE("global average of a constant map") {
    auto y = global_avg_pool(Tensor<float>::full({2, 3, 4, 5}, 7.0f));
    CHECK(y.shape() == Shape{2, 3});
    for (float v : y.data()) CHECK(v == 7.0f);
  }
  SUBCASE("2x2 average pool of 1..16") {
    Tensor<double> x({1, 1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i + 1);
    auto y = avg_pool2d(x, 2, 2);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y[0] == 3.5);
    CHECK(y[1] == 5.5);
    CHECK(y[2] == 11.5);
    CHECK(y[3] == 13.5);
  }
  SUBCASE("odd spatial dims floor-divide") {
    CHECK(avg_pool2d(Tensor<float>({1, 1, 7, 7}), 2, 2).shape() == Shape{1, 1, 3, 3});
  }
  SUBCASE("window larger than input") {
    CHECK_THROWS_AS(avg_pool2d(Tensor<float>({1, 1, 1, 3}), 2, 2), std::invalid_argument);
  }
  SUBCASE("global pool spreads 1/(HW)") {
    Tensor<double> x({1, 2, 2, 3}, std::vector<double>(12, 1.0), true);
    sum(global_avg_pool(x)).backward();
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0 / 6.0));
  }
  SUBCASE("gradients vs finite differences") {
    std::mt19937_64 rng(13);
    auto x = random_tensor({2, 3, 5, 5}, rng);
    auto c1 = random_tensor({2, 3, 2, 2}, rng);
    auto c2 = random_tensor({2, 3}, rng);
    CHECK(gradcheck([&] { return weighted_sum(avg_pool2d(x, 2, 2), c1); }, {x}).max_rel_error < 1e-5);
    CHECK(gradcheck([&] { return weighted_sum(global_avg_pool(x), c2); }, {x}).max_rel_error < 1e-5);
  }
}

TEST_CASE("dense") {
  Tensor<double> x({1, 2}, {1, 2});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  auto y0 = dense(x, eye, Tensor<double>::zeros({2}));
  CHECK(y0[0] == 1.0);
  CHECK(y0[1] == 2.0);
  auto y = dense(x, eye, Tensor<double>::full({2}, 3.0));
  CHECK(y[0] == 4.0);
  CHECK(y[1] == 5.0);
  CHECK_THROWS_AS(dense(x, Tensor<double>({3, 2}), Tensor<double>({2})), std::invalid_argument);

  std::mt19937_64 rng(17);
  auto a = random_tensor({4, 6}, rng);
  auto w = random_tensor({6, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto coeffs = random_tensor({4, 3}, rng);
  CHECK(gradcheck([&] { return weighted_sum(dense(a, w, b), coeffs); }, {a, w, b}).max_rel_error < 1e-5);
}

TEST_CASE("concat and slice") {
  Tensor<double> a({1, 2}, {1, 2}, true);
  Tensor<double> b({1, 1}, {3}, true);
  auto c = concat(a, b);
  CHECK(c.shape() == Shape{1, 3});
  CHECK(c[0] == 1);
  CHECK(c[1] == 2);
  CHECK(c[2] == 3);
  sum(c).backward();
  for (double g : a.grad()) CHECK(g == 1.0);
  CHECK_THROWS_AS(concat(Tensor<double>({2, 2}), Tensor<double>({3, 2})), std::invalid_argument);

  SUBCASE("324 + 324 features") {
    CHECK(concat(Tensor<float>({2, 324}), Tensor<float>({2, 324})).dim(1) == 648);
  }
  SUBCASE("slicing recovers both halves exactly") {
    std::mt19937_64 rng(19);
    for (int trial = 0; trial < 20; ++trial) {
      std::uniform_int_distribution<std::size_t> d(1, 5);
      const std::size_t n = d(rng), ca = d(rng), cb = d(rng), h = d(rng), w = d(rng);
      auto x = random_tensor({n, ca, h, w}, rng);
      auto y = random_tensor({n, cb, h, w}, rng);
      auto xy = concat(x, y);
      auto xs = slice(xy, 0, ca), ys = slice(xy, ca, ca + cb);
      CHECK(std::equal(xs.data().begin(), xs.data().end(), x.data().begin()));
      CHECK(std::equal(ys.data().begin(), ys.data().end(), y.data().begin()));
    }
  }
  SUBCASE("gradient routes to sources") {
    std::mt19937_64 rng(23);
    auto x = random_tensor({2, 2, 3, 3}, rng);
    auto y = random_tensor({2, 3, 3, 3}, rng);
    auto coeffs = random_tensor({2, 5, 3, 3}, rng);
    CHECK(gradcheck([&] { return weighted_sum(concat(x, y), coeffs); }, {x, y}).max_rel_error < 1e-5);
  }
}

TEST_CASE("scale_channels gradient") {
  std::mt19937_64 rng(29);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto s = random_tensor({2, 3}, rng);
  auto coeffs = random_tensor({2, 3, 4, 4}, rng);
  CHECK(gradcheck([&] { return weighted_sum(scale_channels(x, s), coeffs); }, {x, s}).max_rel_error < 1e-5);
}

TEST_CASE("forward replay is bitwise deterministic") {
  auto run = [] {
    std::mt19937_64 rng(31);
    auto x = random_tensor({2, 3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 3, 3}, rng);
    Tensor<double> g = Tensor<double>::full({4}, 1.0), b = Tensor<double>::zeros({4});
    BatchNormStats<double> st(4);
    return global_avg_pool(relu(batch_norm(conv2d(x, w, Tensor<double>(), 1, Padding::kSame), g, b, st, 0.9, true)));
  };
  auto a = run(), b = run();
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}
