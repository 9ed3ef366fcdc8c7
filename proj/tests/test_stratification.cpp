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

#include <set>

#include "aps/stratification.hpp"

using namespace aps;

TEST(Schedule, PrototypeRate) {
  ScheduleConfig c;
  EXPECT_DOUBLE_EQ(prototype_rate(5000, c), 0.15);
  EXPECT_DOUBLE_EQ(prototype_rate(100, c), 0.15);
  EXPECT_NEAR(prototype_rate(40000, c), 0.15 * std::pow(0.125, 0.6), 1e-15);
  EXPECT_NEAR(prototype_rate(40000, c), 0.043077, 1e-6);
  c.fixed_rate = 0.20;
  EXPECT_DOUBLE_EQ(prototype_rate(10000, c), 0.20);
}

TEST(Schedule, CoreStratumCount) {
  ScheduleConfig c;
  EXPECT_EQ(core_stratum_count(5000, c), 10u);
  EXPECT_EQ(core_stratum_count(10000, c), 14u);
  EXPECT_EQ(core_stratum_count(1000000, c), 141u);
  EXPECT_EQ(core_stratum_count(20000, c), 20u);  // exactly 10 * 2
}

TEST(Schedule, TailCount) {
  ScheduleConfig c;
  EXPECT_EQ(tail_count(5000, c), 250u);
  EXPECT_EQ(tail_count(10000, c), 330u);
  EXPECT_EQ(tail_count(100000, c), static_cast<std::size_t>(std::ceil(250.0 * std::pow(20.0, 0.4))));
  EXPECT_EQ(tail_count(100000, c), 829u);
}

TEST(Schedule, AuditBudget) {
  ScheduleConfig c;
  EXPECT_EQ(audit_budget(5000, c), 250u);
  EXPECT_EQ(audit_budget(10000, c), 329u);
  EXPECT_EQ(audit_budget(100, c), 250u);
  c.gamma = 0.0;
  EXPECT_EQ(audit_budget(100, c), 1u);
}

TEST(Schedule, CoreBudget) {
  ScheduleConfig c;
  EXPECT_EQ(core_budget(2000, c), 300u);
  EXPECT_EQ(core_budget(5000, c), 750u);
}

TEST(Schedule, Monotone) {
  ScheduleConfig c;
  std::size_t prev_b = 0, prev_m = 0, prev_o = 0, prev_a = 0;
  double prev_rate = 1.0;
  for (std::size_t n = 100; n <= 2000000; n = n * 11 / 10 + 1) {
    EXPECT_LE(prototype_rate(n, c), prev_rate);
    EXPECT_GE(core_budget(n, c), prev_b);
    EXPECT_GE(core_stratum_count(n, c), prev_m);
    EXPECT_GE(tail_count(n, c), prev_o);
    EXPECT_GE(audit_budget(n, c), prev_a);
    prev_rate = prototype_rate(n, c);
    prev_b = core_budget(n, c);
    prev_m = core_stratum_count(n, c);
    prev_o = tail_count(n, c);
    prev_a = audit_budget(n, c);
  }
}

TEST(Schedule, Sublinear) {
  ScheduleConfig c;
  const double ratio = static_cast<double>(core_budget(50000, c)) / static_cast<double>(core_budget(5000, c));
  EXPECT_NEAR(ratio, std::pow(10.0, 0.4), 1.0 / 750.0);
}

TEST(Schedule, Validation) {
  ScheduleConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.kappa = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.fixed_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TailScores, HandValues) {
  // Columns with median 0 and MAD 1.
  Matrix x(5, 2);
  const double v[5][2] = {{-1, -1}, {0, 0}, {1, 1}, {3, 4}, {-2, -2}};
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 2; ++j) x(i, j) = v[i][j];
  const auto s = tail_scores(x);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[3], 5.0);
}

TEST(TailScores, MadFloorOnConstantColumn) {
  Matrix x(3, 1);
  x(0, 0) = 1.0;
  x(1, 0) = 1.0;
  x(2, 0) = 1.0 + 1e-6;
  const auto s = tail_scores(x);
  EXPECT_NEAR(s[2], 1.0, 1e-9);
  EXPECT_EQ(s[0], 0.0);
}

TEST(TailScores, TopSetMatchesFullSort) {
  Rng rng(200);
  std::normal_distribution<double> z;
  Matrix x(200, 5);
  for (double& v : x.data) v = z(rng);
  const auto s = tail_scores(x);
  // Independent recomputation: medians by full sort.
  std::vector<double> med(5), mad(5);
  for (std::size_t j = 0; j < 5; ++j) {
    std::vector<double> c;
    for (std::size_t i = 0; i < 200; ++i) c.push_back(x(i, j));
    std::sort(c.begin(), c.end());
    med[j] = 0.5 * (c[99] + c[100]);
    for (auto& v : c) v = std::abs(v - med[j]);
    std::sort(c.begin(), c.end());
    mad[j] = 0.5 * (c[99] + c[100]);
  }
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < 200; ++i) {
    double acc = 0;
    for (std::size_t j = 0; j < 5; ++j) acc += std::pow((x(i, j) - med[j]) / mad[j], 2);
    EXPECT_NEAR(std::sqrt(acc), s[i], 1e-9);
    ranked.push_back({-std::sqrt(acc), i});
  }
  std::sort(ranked.begin(), ranked.end());
  std::set<std::size_t> expect;
  for (int i = 0; i < 10; ++i) expect.insert(ranked[i].second);
  const auto top = select_tails(s, 10);
  EXPECT_EQ(std::set<std::size_t>(top.begin(), top.end()), expect);
}

TEST(TailScores, TiesGoToLowerIndex) {
  std::vector<double> s{1.0, 3.0, 2.0, 3.0, 3.0};
  EXPECT_EQ(select_tails(s, 2), (std::vector<std::size_t>{1, 3}));
}

TEST(Partition, RecoversSeparatedBlobs) {
  Rng rng(5);
  std::normal_distribution<double> z(0.0, 0.3);
  const std::size_t n = 400;
  Matrix x(n, 3);
  std::vector<int> truth(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = i % 2;
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = (truth[i] ? 5.0 : -5.0) + z(rng);
  }
  const auto a = partition(x, {}, 2, 42);
  // Zero misassignments up to a label swap.
  std::size_t same = 0;
  for (std::size_t i = 0; i < n; ++i) same += a.stratum[i] == truth[i];
  EXPECT_TRUE(same == 0 || same == n);
}

TEST(Partition, SingleStratumAndDeterminism) {
  Rng rng(6);
  std::normal_distribution<double> z;
  Matrix x(100, 2);
  for (double& v : x.data) v = z(rng);
  std::vector<std::size_t> tails{3, 7};
  const auto one = partition(x, tails, 1, 1);
  EXPECT_EQ(one.members.size(), 1u);
  EXPECT_EQ(one.members[0].size(), 98u);
  const auto a = partition(x, tails, 4, 9);
  const auto b = partition(x, tails, 4, 9);
  EXPECT_EQ(a.stratum, b.stratum);
  for (const auto& m : a.members) EXPECT_FALSE(m.empty());
}

TEST(Partition, Errors) {
  Matrix x(3, 1);
  std::vector<std::size_t> all{0, 1, 2};
  EXPECT_THROW(partition(x, all, 1, 1), ConfigError);
  EXPECT_THROW(partition(x, {}, 4, 1), ConfigError);
  EXPECT_THROW(partition(x, {}, 0, 1), ConfigError);
}

TEST(Stratify, TailsExcludedAndCountsConserved) {
  Rng rng(7);
  std::normal_distribution<double> z;
  Matrix x(2000, 4);
  for (double& v : x.data) v = z(rng);
  const auto a = stratify(x, ScheduleConfig{}, 3);
  EXPECT_EQ(a.tails.size(), 250u);
  EXPECT_EQ(a.stratum_count(), 10u);
  std::size_t total = a.tails.size();
  for (const auto& m : a.members) total += m.size();
  EXPECT_EQ(total, 2000u);
  for (auto t : a.tails) EXPECT_TRUE(a.is_tail(t));
  const std::set<std::size_t> tails(a.tails.begin(), a.tails.end());
  for (const auto& m : a.members)
    for (auto i : m) EXPECT_FALSE(tails.count(i));
}
