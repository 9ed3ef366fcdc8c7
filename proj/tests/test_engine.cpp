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

#include "aps/evaluation.hpp"

using namespace aps;

namespace {

struct World {
  Population pop;
  SocialGraph graph;
  Scenario scenario;
  SyntheticKernel kernel;

  World(std::size_t n, std::size_t T, std::uint64_t seed = 42, std::size_t K = 4)
      : pop(generate_synthetic_population(FeatureSpec::synthetic_default(5), n, seed)),
        graph(build_ws_graph(n, 10, 0.1, seed)),
        scenario(Scenario::generic(K, T)),
        kernel(make_kernel(K, T, seed)) {}

  static KernelConfig make_kernel(std::size_t K, std::size_t T, std::uint64_t seed) {
    KernelConfig k;
    k.feature_dim = 5;
    k.option_count = K;
    k.stage_count = T;
    k.seed = seed;
    return k;
  }

  RolloutInputs inputs() { return {pop, graph, scenario, kernel}; }
};

double neyman_objective(std::span<const std::size_t> sizes, std::span<const double> risks, std::span<const double> b) {
  double s = 0;
  for (std::size_t m = 0; m < sizes.size(); ++m) s += double(sizes[m]) * double(sizes[m]) * risks[m] / b[m];
  return s;
}

}  // namespace

TEST(Allocation, SizeProportionalAtEqualRisk) {
  const std::vector<std::size_t> sizes{600, 400};
  EXPECT_EQ(allocate_budgets(100, sizes, std::vector<double>{1, 1}, 1e-12), (std::vector<std::size_t>{60, 40}));
}

TEST(Allocation, RiskWeighted) {
  const std::vector<std::size_t> sizes{600, 400};
  EXPECT_EQ(allocate_budgets(100, sizes, std::vector<double>{4, 1}, 1e-6), (std::vector<std::size_t>{75, 25}));
}

TEST(Allocation, CapAndRedistribute) {
  const std::vector<std::size_t> sizes{3, 997};
  EXPECT_EQ(allocate_budgets(1000, sizes, std::vector<double>{0, 0}, 1e-6), (std::vector<std::size_t>{3, 997}));
}

TEST(Allocation, MinimumOneAndDegradation) {
  const std::vector<std::size_t> sizes{500, 5, 5, 490};
  const std::vector<double> risks{1, 0, 0, 1};
  const auto b = allocate_budgets(20, sizes, risks, 1e-6);
  for (auto v : b) EXPECT_GE(v, 1u);
  // Near-zero-risk strata are lifted to one above their continuous share.
  const auto s = std::accumulate(b.begin(), b.end(), std::size_t{0});
  EXPECT_GE(s, 20u);
  EXPECT_LE(s, 20u + 4u);
  // Fewer units than strata: the heaviest strata get one each.
  const auto d = allocate_budgets(2, sizes, risks, 1e-6);
  EXPECT_EQ(d, (std::vector<std::size_t>{1, 0, 0, 1}));
  EXPECT_THROW(allocate_budgets(10, sizes, risks, 0.0), ConfigError);
}

TEST(Allocation, ConservationBoundsOnRandomInstances) {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> sz(1, 300), mm(1, 12), bb(1, 2000);
  std::uniform_real_distribution<double> rk(0.0, 3.0);
  for (int it = 0; it < 500; ++it) {
    const std::size_t M = mm(rng);
    std::vector<std::size_t> sizes(M);
    std::vector<double> risks(M);
    std::size_t total = 0;
    for (std::size_t m = 0; m < M; ++m) {
      total += (sizes[m] = sz(rng));
      risks[m] = rk(rng);
    }
    const std::size_t b = bb(rng);
    const auto out = allocate_budgets(b, sizes, risks, 1e-6);
    std::size_t s = 0;
    for (std::size_t m = 0; m < M; ++m) {
      EXPECT_LE(out[m], sizes[m]);
      if (b >= M) EXPECT_GE(out[m], 1u);
      s += out[m];
    }
    EXPECT_LE(s, b + M);
    EXPECT_GE(s, std::min(b, total));
  }
}

TEST(Allocation, ContinuousAllocationIsNeymanOptimal) {
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> sz(10, 500), mm(2, 8);
  std::uniform_real_distribution<double> rk(0.01, 2.0), jitter(-0.3, 0.3);
  for (int it = 0; it < 50; ++it) {
    const std::size_t M = mm(rng);
    std::vector<std::size_t> sizes(M);
    std::vector<double> risks(M);
    for (std::size_t m = 0; m < M; ++m) {
      sizes[m] = sz(rng);
      risks[m] = rk(rng);
    }
    const double B = 100.0;
    const auto star = continuous_allocation(B, sizes, risks, 1e-12);
    const double best = neyman_objective(sizes, risks, star);
    for (int p = 0; p < 100; ++p) {
      std::vector<double> alt(M);
      double s = 0;
      for (std::size_t m = 0; m < M; ++m) s += (alt[m] = star[m] * std::exp(jitter(rng)));
      for (double& v : alt) v *= B / s;
      EXPECT_LE(best, neyman_objective(sizes, risks, alt) * (1 + 1e-12));
    }
  }
}

TEST(Prototypes, WholeStratumAndDeterminism) {
  std::vector<std::size_t> members{4, 8, 15, 16, 23, 42};
  EXPECT_EQ(select_prototypes(members, 6, 1, 0, 9), members);
  EXPECT_EQ(select_prototypes(members, 3, 2, 1, 9), select_prototypes(members, 3, 2, 1, 9));
  EXPECT_THROW(select_prototypes(members, 7, 1, 0, 9), InvariantError);
}

TEST(Prototypes, MatchesIndependentReplay) {
  std::vector<std::size_t> members(100);
  std::iota(members.begin(), members.end(), std::size_t{1000});
  const auto got = select_prototypes(members, 10, 1, 0, 42);
  // Replay the keyed partial Fisher-Yates draw.
  Rng rng(derive_seed(42, {stream::kPrototypes, 1, 0}));
  auto pool = members;
  for (std::size_t i = 0; i < 10; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  std::vector<std::size_t> expect(pool.begin(), pool.begin() + 10);
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(got, expect);
}

TEST(Interpolate, WeightedSoftVector) {
  // Distances chosen so the normalized weights are (0.5, 0.3, 0.2).
  std::vector<Support> c{{10, 1, 1.0 / 0.5 - kDistanceOffset},
                         {11, 1, 1.0 / 0.3 - kDistanceOffset},
                         {12, 4, 1.0 / 0.2 - kDistanceOffset}};
  const auto f = interpolate(c, 5, 5);
  EXPECT_NEAR(f.soft[0], 0.0, 1e-15);
  EXPECT_NEAR(f.soft[1], 0.8, 1e-12);
  EXPECT_NEAR(f.soft[4], 0.2, 1e-12);
  EXPECT_EQ(f.hard, 1);
}

TEST(Interpolate, TieGoesToLowerOption) {
  std::vector<Support> c{{1, 2, 1.0}, {2, 0, 1.0}};
  const auto f = interpolate(c, 5, 3);
  EXPECT_DOUBLE_EQ(f.soft[0], 0.5);
  EXPECT_DOUBLE_EQ(f.soft[2], 0.5);
  EXPECT_EQ(f.hard, 0);
}

TEST(Interpolate, CoincidentPrototypeDominates) {
  std::vector<Support> c{{1, 3, 0.0}, {2, 0, 1.0}, {3, 0, 1.0}, {4, 0, 1.0}, {5, 0, 1.0}};
  const auto f = interpolate(c, 5, 4);
  const double w0 = 1.0 / kDistanceOffset, w1 = 1.0 / (1.0 + kDistanceOffset);
  EXPECT_NEAR(f.soft[3], w0 / (w0 + 4 * w1), 1e-12);
  EXPECT_GT(f.soft[3], 0.9999);
  EXPECT_EQ(f.hard, 3);
}

TEST(Interpolate, KeepsKappaNearestWithIndexTies) {
  std::vector<Support> c{{9, 0, 2.0}, {3, 1, 1.0}, {7, 2, 1.0}, {5, 2, 1.0}, {1, 0, 3.0}};
  const auto f = interpolate(c, 3, 3);
  ASSERT_EQ(f.supports.size(), 3u);
  EXPECT_EQ(f.supports[0].agent, 3u);
  EXPECT_EQ(f.supports[1].agent, 5u);
  EXPECT_EQ(f.supports[2].agent, 7u);
  EXPECT_THROW(interpolate({}, 3, 3), InvariantError);
}

TEST(Engine, FullBudgetMatchesReference) {
  World w(300, 4);
  EngineConfig cfg;
  cfg.rounds = 4;
  cfg.schedule.fixed_rate = 1.0;
  auto in = w.inputs();
  const auto sim = run_simulation(in, cfg);
  SyntheticKernel k2(World::make_kernel(4, 4, 42));
  RolloutInputs rin{w.pop, w.graph, w.scenario, k2};
  const auto ref = run_reference(rin, 4);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto& rr = sim.rounds[t];
    EXPECT_EQ(rr.hard, ref.rounds[t].hard);
    EXPECT_TRUE(rr.design.frame.empty());
    EXPECT_TRUE(rr.design.audited.empty());
    for (std::size_t y = 0; y < 4; ++y) {
      EXPECT_NEAR(rr.unprojected[y], ref.rounds[t].distribution[y], 1e-12);
      EXPECT_NEAR(rr.projected[y], ref.rounds[t].distribution[y], 1e-12);
    }
  }
}

TEST(Engine, RoundInvariants) {
  World w(600, 3, 7);
  EngineConfig cfg;
  cfg.rounds = 3;
  auto in = w.inputs();
  const auto sim = run_simulation(in, cfg);
  const std::set<std::size_t> tails(sim.strata.tails.begin(), sim.strata.tails.end());
  for (const auto& rr : sim.rounds) {
    const std::size_t direct = std::accumulate(rr.budgets.begin(), rr.budgets.end(), std::size_t{0});
    EXPECT_EQ(rr.prototypes.size(), direct);
    EXPECT_EQ(rr.total_calls(), direct + rr.tails.size() + rr.design.audited.size());
    const std::set<std::size_t> protos(rr.prototypes.begin(), rr.prototypes.end());
    for (std::size_t i = 0; i < 600; ++i) {
      const auto row = rr.soft.row(i);
      EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
      EXPECT_EQ(rr.hard[i], argmax_lowest(row));
      for (auto s : rr.supports[i]) EXPECT_FALSE(tails.count(s)) << "tail used as support";
      if (tails.count(i) || protos.count(i)) {
        EXPECT_TRUE(rr.supports[i].empty());
        EXPECT_EQ(row[static_cast<std::size_t>(rr.hard[i])], 1.0);
      }
    }
    for (auto a : rr.design.audited) {
      EXPECT_FALSE(protos.count(a));
      EXPECT_FALSE(tails.count(a));
    }
  }
}

TEST(Engine, RoundReplayFromPersistedInputs) {
  World w(300, 2, 42);
  EngineConfig cfg;
  cfg.rounds = 1;
  auto in = w.inputs();
  const auto sim = run_simulation(in, cfg);
  // Re-execute round 1 with a fresh oracle from a serialized initial state.
  EngineState init;
  init.hard.assign(300, kNoState);
  init.risks.assign(sim.strata.stratum_count(), 1.0);
  const auto persisted = nlohmann::json::parse(to_json(init).dump());
  SyntheticKernel k2(World::make_kernel(4, 2, 42));
  RolloutInputs in2{w.pop, w.graph, w.scenario, k2};
  const auto strata = stratify(w.pop.standardized, cfg.schedule, cfg.seed);
  const auto rr = run_round(in2, strata, cfg, engine_state_from_json(persisted), 1);
  EXPECT_EQ(histogram(rr.hard, 4), histogram(sim.rounds[0].hard, 4));
  EXPECT_EQ(rr.hard, sim.rounds[0].hard);
}

TEST(Engine, ResumeIsBitIdentical) {
  World w(400, 8, 5);
  EngineConfig cfg;
  cfg.rounds = 8;
  auto in = w.inputs();
  const auto full = run_simulation(in, cfg);
  std::optional<EngineState> after4;
  cfg.rounds = 4;
  run_simulation(in, cfg, {}, std::nullopt, [&](const RoundResult&, const EngineState& s) { after4 = s; });
  ASSERT_TRUE(after4);
  cfg.rounds = 8;
  const auto restored = engine_state_from_json(nlohmann::json::parse(to_json(*after4).dump()));
  const auto rest = run_simulation(in, cfg, {}, restored);
  ASSERT_EQ(rest.rounds.size(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(rest.rounds[t].hard, full.rounds[t + 4].hard);
    EXPECT_EQ(rest.rounds[t].projected, full.rounds[t + 4].projected);
    EXPECT_EQ(rest.rounds[t].risks, full.rounds[t + 4].risks);
  }
}

TEST(Engine, SingleRoundEqualsRunRound) {
  World w(300, 1, 2);
  EngineConfig cfg;
  cfg.rounds = 1;
  auto in = w.inputs();
  const auto sim = run_simulation(in, cfg);
  EngineState s0{0, std::vector<Option>(300, kNoState), std::vector<double>(sim.strata.stratum_count(), 1.0)};
  const auto rr = run_round(in, sim.strata, cfg, s0, 1);
  EXPECT_EQ(rr.hard, sim.rounds[0].hard);
  EXPECT_EQ(rr.unprojected, sim.rounds[0].unprojected);
}

TEST(Engine, MedoidFirstIncludesNearestToCentroid) {
  World w(500, 1, 3);
  EngineConfig cfg;
  cfg.rounds = 1;
  cfg.selection = PrototypeSelection::kMedoidFirst;
  auto in = w.inputs();
  const auto sim = run_simulation(in, cfg);
  const auto& X = w.pop.standardized;
  const std::set<std::size_t> protos(sim.rounds[0].prototypes.begin(), sim.rounds[0].prototypes.end());
  for (std::size_t m = 0; m < sim.strata.stratum_count(); ++m) {
    std::size_t best = 0;
    double bd = 1e300;
    for (auto i : sim.strata.members[m]) {
      const double d = squared_distance(X.row(i), sim.strata.centroids.row(m));
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    EXPECT_TRUE(protos.count(best)) << "stratum " << m;
  }
}

TEST(Engine, StateJsonRoundTrip) {
  EngineState s{3, {0, 2, kNoState}, {0.5, 1.0}};
  const auto t = engine_state_from_json(to_json(s));
  EXPECT_EQ(t.completed_rounds, 3u);
  EXPECT_EQ(t.hard, s.hard);
  EXPECT_EQ(t.risks, s.risks);
}
