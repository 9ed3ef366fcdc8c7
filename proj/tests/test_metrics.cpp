// Copyright 2026 The APS Authors
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

#include <gtest/gtest.h>

#include "aps/metrics.hpp"

using namespace aps;

namespace {

Distribution random_simplex(Rng& rng, std::size_t k) {
  std::exponential_distribution<double> e(1.0);
  Distribution p(k);
  double s = 0;
  for (double& v : p) s += (v = e(rng));
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

TEST(Jsd, Examples) {
  const Distribution p{0.2, 0.3, 0.5};
  EXPECT_EQ(jsd(p, p), 0.0);
  EXPECT_NEAR(jsd(Distribution{1, 0}, Distribution{0, 1}), 1.0, 1e-12);
  // 0.5*[0.5 log2(0.5/0.75) + 0.5 log2(0.5/0.25)] + 0.5*[1 log2(1/0.75)].
  const double expect = 0.5 * (0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(2.0)) + 0.5 * std::log2(1.0 / 0.75);
  EXPECT_NEAR(jsd(Distribution{0.5, 0.5}, Distribution{1, 0}), expect, 1e-12);
  EXPECT_NEAR(jsd(Distribution{0.5, 0.5}, Distribution{1, 0}), 0.31128, 1e-4);
  EXPECT_THROW(jsd(Distribution{1}, Distribution{0.5, 0.5}), ConfigError);
}

TEST(Jsd, SymmetricBoundedAndVanishing) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_simplex(rng, 5), q = random_simplex(rng, 5);
    EXPECT_DOUBLE_EQ(jsd(p, q), jsd(q, p));
    EXPECT_GE(jsd(p, q), 0.0);
    EXPECT_LE(jsd(p, q), 1.0);
    auto r = p;
    r[0] += 2e-7;
    r[1] -= 2e-7;
    if (r[1] >= 0) {
      EXPECT_LT(l1_distance(p, r), 1e-6);
      EXPECT_LT(jsd(p, r), 1e-5);
    }
  }
}

TEST(ExactMatch, Examples) {
  const std::vector<Option> a{0, 1, 1, 0}, b{1, 0, 0, 1}, c{0, 1, 1, 1};
  EXPECT_EQ(exact_match(a, a), 1.0);
  EXPECT_EQ(exact_match(a, b), 0.0);
  EXPECT_EQ(exact_match(a, c), 0.75);
  EXPECT_THROW(exact_match(a, std::vector<Option>{0}), ConfigError);
}

TEST(Wilson, Examples) {
  EXPECT_NEAR(normal_quantile_two_sided(0.95), 1.959964, 1e-6);
  const auto w = wilson_interval(50, 100);
  EXPECT_NEAR(w.low, 0.4038, 1e-4);
  EXPECT_NEAR(w.high, 0.5962, 1e-4);
  EXPECT_EQ(wilson_interval(0, 30).low, 0.0);
  EXPECT_NEAR(wilson_interval(30, 30).high, 1.0, 1e-12);
  for (std::size_t n = 1; n < 60; ++n)
    for (std::size_t s = 0; s <= n; ++s) {
      const auto i = wilson_interval(s, n, 0.9);
      EXPECT_GE(i.low, 0.0);
      EXPECT_LE(i.high, 1.0);
      EXPECT_LE(i.low, static_cast<double>(s) / n + 1e-12);
      EXPECT_GE(i.high, static_cast<double>(s) / n - 1e-12);
    }
  EXPECT_THROW(wilson_interval(3, 2), ConfigError);
  EXPECT_THROW(wilson_interval(0, 0), ConfigError);
}

TEST(Bootstrap, IdenticalPairsGiveZero) {
  std::vector<Option> a(200);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<Option>(i % 3);
  const auto ci = bootstrap_jsd_ci(a, a, 3, 500, 0.95, 1);
  EXPECT_EQ(ci.low, 0.0);
  EXPECT_EQ(ci.high, 0.0);
}

TEST(Bootstrap, DeterministicAndContainsPoint) {
  Rng rng(2);
  std::uniform_int_distribution<int> u(0, 3);
  std::bernoulli_distribution flip(0.2);
  std::vector<Option> m(500), r(500);
  for (std::size_t i = 0; i < 500; ++i) {
    r[i] = u(rng);
    m[i] = flip(rng) ? u(rng) : r[i];
  }
  const auto a = bootstrap_jsd_ci(m, r, 4, 1000, 0.95, 7);
  const auto b = bootstrap_jsd_ci(m, r, 4, 1000, 0.95, 7);
  EXPECT_EQ(a.low, b.low);
  EXPECT_EQ(a.high, b.high);
  const double point = jsd(histogram(m, 4), histogram(r, 4));
  EXPECT_LE(a.low, point);
  EXPECT_GE(a.high, point);
  EXPECT_THROW(bootstrap_jsd_ci(m, r, 4, 50, 0.95, 7), ConfigError);
}

TEST(Bootstrap, MultinomialFallback) {
  const std::vector<double> mc{40, 30, 30}, rc{35, 35, 30};
  const auto a = multinomial_bootstrap_jsd_ci(mc, rc, 500, 0.95, 3);
  const auto b = multinomial_bootstrap_jsd_ci(mc, rc, 500, 0.95, 3);
  EXPECT_EQ(a.low, b.low);
  EXPECT_LE(a.low, a.high);
  EXPECT_GE(a.low, 0.0);
}
