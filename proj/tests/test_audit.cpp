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

#include "aps/audit.hpp"

using namespace aps;

namespace {

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v(hi - lo);
  std::iota(v.begin(), v.end(), lo);
  return v;
}

// Five agents, two options: agent 0 direct (1,0), agents 1..4 at (0.5,0.5).
Matrix five_agent_soft() {
  Matrix h(5, 2, 0.5);
  h(0, 0) = 1.0;
  h(0, 1) = 0.0;
  return h;
}

}  // namespace

TEST(Sampling, PureUniformInclusion) {
  std::vector<Option> predicted(80);
  for (std::size_t i = 0; i < 80; ++i) predicted[i] = static_cast<Option>(i % 4);
  AuditSamplingConfig cfg;
  cfg.epsilon = 1.0;
  const auto d = sample_audit_set({range(0, 80)}, 8, predicted, 4, cfg, 1, 1);
  ASSERT_EQ(d.psi.size(), 80u);
  for (double p : d.psi) EXPECT_DOUBLE_EQ(p, 0.1);
  EXPECT_EQ(d.audited.size(), 8u);
  EXPECT_EQ(d.branch[0], AuditBranch::kUniform);
}

TEST(Sampling, RareCellGetsADraw) {
  std::vector<std::size_t> cells{2, 40, 38};
  const auto alloc = cell_allocation(cells, 8, 0.05);
  EXPECT_GE(alloc[0], 1u);
  EXPECT_EQ(alloc[0] + alloc[1] + alloc[2], 8u);
  // In the sampled design, every stratified-branch draw touches the rare cell.
  std::vector<Option> predicted(80, 1);
  predicted[10] = 0;
  predicted[50] = 0;
  for (std::size_t i = 40; i < 80; ++i)
    if (i != 50) predicted[i] = 2;
  AuditSamplingConfig cfg;
  std::size_t stratified = 0;
  for (std::size_t round = 1; round <= 50; ++round) {
    const auto d = sample_audit_set({range(0, 80)}, 8, predicted, 3, cfg, 9, round);
    if (d.branch[0] != AuditBranch::kStateStratified) continue;
    ++stratified;
    const bool hit = std::any_of(d.audited.begin(), d.audited.end(), [&](std::size_t i) { return predicted[i] == 0; });
    EXPECT_TRUE(hit) << "round " << round;
  }
  EXPECT_GT(stratified, 30u);
}

TEST(Sampling, StratumAllocationProportionalWithMinimumOne) {
  std::vector<std::size_t> sizes{100, 0, 3, 897};
  // One each first; the remaining 47 split as (4.7, 0, 0.141, 42.159).
  EXPECT_EQ(audit_stratum_allocation(sizes, 50), (std::vector<std::size_t>{6, 0, 1, 43}));
  const auto capped = audit_stratum_allocation(sizes, 5000);
  EXPECT_EQ(capped, (std::vector<std::size_t>{100, 0, 3, 897}));
}

TEST(Sampling, EmptyFramesGiveEmptyDesign) {
  const auto d = sample_audit_set({{}, {}}, 10, std::vector<Option>{}, 3, AuditSamplingConfig{}, 1, 1);
  EXPECT_TRUE(d.frame.empty());
  EXPECT_TRUE(d.audited.empty());
}

TEST(Sampling, MonteCarloInclusionMatchesRecordedPsi) {
  const std::size_t n = 100;
  std::vector<Option> predicted(n);
  Rng rng(11);
  std::discrete_distribution<int> pick({0.7, 0.26, 0.04});
  for (auto& p : predicted) p = pick(rng);
  const std::vector<std::vector<std::size_t>> frames{range(0, 60), range(60, 100)};
  AuditSamplingConfig cfg;
  const auto ref = sample_audit_set(frames, 12, predicted, 3, cfg, 5, 1);
  const int reps = 20000;
  std::vector<int> hits(n, 0);
  for (int r = 0; r < reps; ++r) {
    const auto d = sample_audit_set(frames, 12, predicted, 3, cfg, 1000 + r, 1);
    for (auto i : d.audited) ++hits[i];
  }
  for (std::size_t q = 0; q < ref.frame.size(); ++q) {
    const double psi = ref.psi[q];
    const double se = std::sqrt(psi * (1 - psi) / reps);
    const double freq = hits[ref.frame[q]] / static_cast<double>(reps);
    if (se == 0.0)
      EXPECT_EQ(freq, psi);
    else
      EXPECT_LE(std::abs(freq - psi), 3 * se) << "agent " << ref.frame[q];
  }
}

TEST(Sampling, RejectsBadEpsilon) {
  std::vector<Option> predicted(10, 0);
  AuditSamplingConfig cfg;
  cfg.epsilon = 0.0;
  EXPECT_THROW(sample_audit_set({range(0, 10)}, 2, predicted, 1, cfg, 1, 1), DesignError);
}

TEST(Correct, HandExamples) {
  const auto h = five_agent_soft();
  const std::vector<std::size_t> audited{2, 3};
  const std::vector<double> psi{0.5, 0.5};
  const auto ab = audit_correct(h, audited, std::vector<Option>{0, 1}, psi);
  EXPECT_NEAR(ab[0], 0.6, 1e-15);
  EXPECT_NEAR(ab[1], 0.4, 1e-15);
  const auto bb = audit_correct(h, audited, std::vector<Option>{1, 1}, psi);
  EXPECT_NEAR(bb[0], 0.2, 1e-15);
  EXPECT_NEAR(bb[1], 0.8, 1e-15);
}

TEST(Correct, EmptyAuditIsSoftMean) {
  const auto h = five_agent_soft();
  const auto e = audit_correct(h, {}, {}, {});
  EXPECT_EQ(e[0], (1.0 + 0.5 * 4) / 5);
  EXPECT_EQ(e[1], (0.5 * 4) / 5);
}

TEST(Correct, RejectsNonPositivePsiAndMisalignment) {
  const auto h = five_agent_soft();
  const std::vector<std::size_t> audited{2};
  EXPECT_THROW(audit_correct(h, audited, std::vector<Option>{0}, std::vector<double>{0.0}), DesignError);
  EXPECT_THROW(audit_correct(h, audited, std::vector<Option>{}, std::vector<double>{0.5}), InvariantError);
}

TEST(Correct, SumsToOneEvenWhenNegative) {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Matrix h(50, 4);
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0;
    for (std::size_t y = 0; y < 4; ++y) s += (h(i, y) = u(rng));
    for (std::size_t y = 0; y < 4; ++y) h(i, y) /= s;
  }
  std::vector<std::size_t> audited{1, 5, 9, 20};
  std::vector<Option> labels{3, 3, 3, 3};
  std::vector<double> psi{0.02, 0.03, 0.05, 0.02};
  const auto e = audit_correct(h, audited, labels, psi);
  EXPECT_NEAR(std::accumulate(e.begin(), e.end(), 0.0), 1.0, 1e-12);
  EXPECT_TRUE(std::any_of(e.begin(), e.end(), [](double v) { return v < 0; }));
}

TEST(Projection, Examples) {
  const auto p = project_simplex(Distribution{-0.1, 0.6, 0.5});
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 6.0 / 11, 1e-15);
  EXPECT_NEAR(p[2], 5.0 / 11, 1e-15);
  const auto u = project_simplex(Distribution{0, 0, 0});
  for (double v : u) EXPECT_DOUBLE_EQ(v, 1.0 / 3);
  const Distribution q{0.25, 0.25, 0.5};
  EXPECT_EQ(project_simplex(q), q);
  EXPECT_THROW(project_simplex(Distribution{std::nan(""), 1.0}), InvariantError);
}

TEST(Diagnostics, PerfectAgreement) {
  std::vector<AuditObservation> obs(3);
  for (std::size_t i = 0; i < 3; ++i) {
    obs[i].predicted = obs[i].shadow = static_cast<Option>(i % 2);
    obs[i].soft = one_hot(obs[i].predicted, 2);
  }
  const auto d = compute_diagnostics(obs, 2);
  EXPECT_EQ(d.mismatch, 0.0);
  EXPECT_EQ(d.residual_variance, 0.0);
  EXPECT_EQ(d.monitoring_jsd, 0.0);
  EXPECT_EQ(d.rare_recall, 1.0);
}

TEST(Diagnostics, MismatchHalf) {
  std::vector<AuditObservation> obs(2);
  obs[0].predicted = 0;
  obs[0].shadow = 0;
  obs[1].predicted = 0;
  obs[1].shadow = 1;
  for (auto& o : obs) o.soft = one_hot(0, 2);
  EXPECT_EQ(compute_diagnostics(obs, 2).mismatch, 0.5);
}

TEST(Diagnostics, ResidualVarianceMatchesRecomputation) {
  Rng rng(50);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> lab(0, 2);
  std::vector<AuditObservation> obs(50);
  for (auto& o : obs) {
    o.soft = {u(rng), u(rng), u(rng)};
    const double s = o.soft[0] + o.soft[1] + o.soft[2];
    for (double& v : o.soft) v /= s;
    o.predicted = argmax_lowest(o.soft);
    o.shadow = lab(rng);
  }
  double expect = 0;
  for (int y = 0; y < 3; ++y) {
    // Two-pass textbook sample variance.
    std::vector<double> r;
    for (const auto& o : obs) r.push_back((o.shadow == y) - o.soft[static_cast<std::size_t>(y)]);
    long double m = 0;
    for (double v : r) m += v;
    m /= r.size();
    long double ss = 0;
    for (double v : r) ss += (v - m) * (v - m);
    expect += static_cast<double>(ss / (r.size() - 1));
  }
  EXPECT_NEAR(compute_diagnostics(obs, 3).residual_variance, expect, 1e-12);
}

TEST(Diagnostics, SupportTermsAndRareRecall) {
  std::vector<AuditObservation> obs(20);
  for (std::size_t i = 0; i < 20; ++i) {
    obs[i].predicted = 0;
    obs[i].shadow = i == 0 ? 1 : 0;
    obs[i].soft = one_hot(0, 2);
    obs[i].support_distances = {1.0, 3.0};
    obs[i].support_options = {0, 1};
  }
  const auto d = compute_diagnostics(obs, 2, 0.1);
  EXPECT_DOUBLE_EQ(d.support_distance, 2.0);
  EXPECT_NEAR(d.disagreement_slope, 1.0 / (2.0 + 1e-6), 1e-12);
  EXPECT_EQ(d.rare_recall, 0.0);  // the one rare label was missed
  EXPECT_DOUBLE_EQ(d.mismatch, 0.05);
}

TEST(Risk, Examples) {
  EXPECT_EQ(risk_score(StratumDiagnostics{}), 0.0);
  StratumDiagnostics d;
  d.residual_variance = 0.2;
  d.disagreement_slope = 1.0;
  d.support_distance = 0.5;
  d.mismatch = 0.1;
  d.rare_recall = 0.9;
  EXPECT_NEAR(risk_score(d), 0.47, 1e-12);
  RiskWeights w;
  w.lambda_e = 2.0;
  EXPECT_NEAR(risk_score(d, w) - risk_score(d), 0.01, 1e-12);
  w.lambda_e = -1.0;
  EXPECT_THROW(risk_score(d, w), ConfigError);
}

TEST(Risk, NormalizationByAuditedMaxima) {
  std::vector<StratumDiagnostics> ds(3);
  ds[0].audits = 4;
  ds[0].mismatch = 0.2;
  ds[0].residual_variance = 1.0;
  ds[1].audits = 4;
  ds[1].mismatch = 0.4;
  ds[1].residual_variance = 0.5;
  ds[2].audits = 0;
  ds[2].mismatch = 0.9;  // ignored for the maxima
  const auto n = normalize_diagnostics(ds);
  EXPECT_DOUBLE_EQ(n[0].mismatch, 0.5);
  EXPECT_DOUBLE_EQ(n[1].mismatch, 1.0);
  EXPECT_DOUBLE_EQ(n[0].residual_variance, 1.0);
  EXPECT_DOUBLE_EQ(n[1].residual_variance, 0.5);
  EXPECT_EQ(n[0].support_distance, 0.0);
}
