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
#include <sstream>

#include "fixtures.hpp"
#include "kappa_oracle.hpp"
#include "msed/metrics.hpp"

using namespace msed;
using msed::testing::brute_force_kappa;
using msed::testing::fixture;

TEST_CASE("accumulate") {
  ConfusionMatrix cm;
  cm.accumulate(2, 2);
  CHECK(cm.at(2, 2) == 1);
  cm.accumulate(1, 3);
  cm.accumulate(1, 3);
  CHECK(cm.at(1, 3) == 2);
  CHECK(cm.total() == 3);
  CHECK_THROWS_AS(cm.accumulate(5, 0), std::out_of_range);
  CHECK_THROWS_AS(cm.accumulate(0, -1), std::out_of_range);
}

TEST_CASE("merge is entrywise addition") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> lab(0, 4);
  ConfusionMatrix whole, a, b;
  for (int i = 0; i < 200; ++i) {
    int x = lab(rng), y = lab(rng);
    whole.accumulate(x, y);
    (i % 2 ? a : b).accumulate(x, y);
  }
  a.merge(b);
  CHECK(a == whole);
}

TEST_CASE("precision recall f1") {
  ConfusionMatrix two(2, {8, 2, 1, 9});
  auto prf = precision_recall_f1(two);
  CHECK(prf.per_class[0].precision == doctest::Approx(8.0 / 9.0));
  CHECK(prf.per_class[0].recall == doctest::Approx(0.8));
  CHECK(prf.per_class[0].f1 == doctest::Approx(2 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8)));
  CHECK(prf.per_class[0].f1 == doctest::Approx(0.842).epsilon(1e-3));

  ConfusionMatrix diag(5, {3, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 4});
  auto perfect = precision_recall_f1(diag);
  CHECK(perfect.macro.precision == 1.0);
  CHECK(perfect.macro.recall == 1.0);
  CHECK(perfect.macro.f1 == 1.0);

  // Class 1 never predicted and never correct: zero, not NaN.
  ConfusionMatrix sparse(3, {4, 0, 1, 2, 0, 0, 0, 0, 3});
  auto s = precision_recall_f1(sparse);
  CHECK(s.per_class[1].precision == 0.0);
  CHECK(s.per_class[1].f1 == 0.0);
  CHECK_FALSE(std::isnan(s.macro.f1));

  auto table1 = precision_recall_f1(ConfusionMatrix::from_csv_file(fixture("aptos_exp1_classification.csv")));
  CHECK(std::abs(table1.macro.precision - 0.67) <= 0.015);
  CHECK(std::abs(table1.macro.recall - 0.59) <= 0.015);
}

TEST_CASE("f1 is the harmonic mean of its own precision and recall") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> cnt(0, 30);
  for (int t = 0; t < 100; ++t) {
    std::vector<std::uint64_t> c(25);
    for (auto& v : c) v = cnt(rng);
    auto prf = precision_recall_f1(ConfusionMatrix(5, c));
    for (const auto& s : prf.per_class) {
      if (s.precision + s.recall == 0)
        CHECK(s.f1 == 0.0);
      else
        CHECK(s.f1 == doctest::Approx(2 * s.precision * s.recall / (s.precision + s.recall)));
    }
  }
}

TEST_CASE("accuracy") {
  auto t1 = ConfusionMatrix::from_csv_file(fixture("aptos_exp1_classification.csv"));
  CHECK(t1.trace() == 297);
  CHECK(t1.total() == 367);
  CHECK(accuracy(t1) == doctest::Approx(297.0 / 367.0));
  auto t2 = ConfusionMatrix::from_csv_file(fixture("aptos_exp1_multitask.csv"));
  CHECK(t2.trace() == 313);
  CHECK(accuracy(t2) == doctest::Approx(313.0 / 367.0));
  CHECK(accuracy(ConfusionMatrix(2, {1, 0, 0, 1})) == 1.0);
  CHECK_THROWS_AS(accuracy(ConfusionMatrix(3)), std::invalid_argument);

  // Equals recall weighted by class support.
  auto prf = precision_recall_f1(t1);
  double micro = 0;
  for (std::size_t c = 0; c < 5; ++c) micro += prf.per_class[c].recall * double(t1.row_sum(c)) / double(t1.total());
  CHECK(accuracy(t1) == doctest::Approx(micro).epsilon(1e-12));
}

TEST_CASE("weighted kappa") {
  auto t1 = ConfusionMatrix::from_csv_file(fixture("aptos_exp1_classification.csv"));
  auto k = weighted_kappa_detail(t1);
  CHECK(k.weighted_observed == doctest::Approx(11.625).epsilon(1e-12));
  CHECK(k.weighted_expected == doctest::Approx(73.672).epsilon(1e-5));
  CHECK(k.value == doctest::Approx(0.842).epsilon(1e-3));

  ConfusionMatrix diag(5, {3, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 4});
  CHECK(weighted_kappa(diag) == 1.0);

  SUBCASE("single-class marginals are degenerate") {
    ConfusionMatrix one(5);
    for (int i = 0; i < 4; ++i) one.accumulate(2, 2);
    auto d = weighted_kappa_detail(one);
    CHECK(d.degenerate);
    CHECK(d.value == 0.0);
  }
  SUBCASE("matches brute force on random matrices") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> cnt(0, 50);
    for (int t = 0; t < 200; ++t) {
      std::vector<std::uint64_t> c(25);
      for (auto& v : c) v = cnt(rng);
      ConfusionMatrix cm(5, c);
      auto oracle = brute_force_kappa(cm);
      auto got = weighted_kappa_detail(cm);
      CHECK(got.value == doctest::Approx(oracle.kappa).epsilon(1e-12));
      CHECK(got.weighted_observed == doctest::Approx(oracle.observed).epsilon(1e-12));
    }
  }
  SUBCASE("invariant under integer scaling") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> cnt(0, 20), scale(2, 9);
    for (int t = 0; t < 50; ++t) {
      std::vector<std::uint64_t> c(25);
      for (auto& v : c) v = cnt(rng);
      auto s = static_cast<std::uint64_t>(scale(rng));
      std::vector<std::uint64_t> cs(c);
      for (auto& v : cs) v *= s;
      CHECK(weighted_kappa(ConfusionMatrix(5, cs)) == doctest::Approx(weighted_kappa(ConfusionMatrix(5, c))));
    }
  }
  SUBCASE("independent predictions give zero") {
    // O = outer(rows, cols) / total with integer entries.
    const std::vector<std::uint64_t> rows{2, 4, 6, 2, 6}, cols{5, 5, 0, 5, 5};
    std::vector<std::uint64_t> c;
    for (auto r : rows)
      for (auto col : cols) c.push_back(r * col / 20);
    CHECK(std::abs(weighted_kappa(ConfusionMatrix(5, c))) < 1e-12);
  }
}

TEST_CASE("csv parsing and report formatting") {
  std::istringstream in("# comment\n1,2\n\n3,4\n");
  auto cm = ConfusionMatrix::from_csv(in);
  CHECK(cm.classes() == 2);
  CHECK(cm.at(1, 0) == 3);
  std::istringstream bad("1,2\n3\n");
  CHECK_THROWS_AS(ConfusionMatrix::from_csv(bad), std::invalid_argument);
  std::istringstream neg("1,-2\n3,4\n");
  CHECK_THROWS_AS(ConfusionMatrix::from_csv(neg), std::invalid_argument);
  std::istringstream junk("1,x\n3,4\n");
  CHECK_THROWS_AS(ConfusionMatrix::from_csv(junk), std::invalid_argument);

  std::ostringstream out;
  cm.to_csv(out);
  std::istringstream back(out.str());
  CHECK(ConfusionMatrix::from_csv(back) == cm);

  auto t2 = ConfusionMatrix::from_csv_file(fixture("aptos_exp1_multitask.csv"));
  auto rep = compute_report(t2);
  CHECK(rep.total == 367);
  CHECK(rep.wks == doctest::Approx(0.88).epsilon(0.01));
  auto text = format_report_text(t2, rep);
  CHECK(text.find("accuracy 0.8529") != std::string::npos);
  auto jsonl = format_report_jsonl(rep);
  CHECK(jsonl.find("\"metric\":\"wks\"") != std::string::npos);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 5 * 3 + 3 + 3);
}
