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

#pragma once

// Brute-force reference rollouts, same-budget baselines and the empirical
// error decomposition for synthetic oracles.

#include "aps/engine.hpp"
#include "aps/metrics.hpp"

namespace aps {

struct TrajectoryRound {
  std::vector<Option> hard;
  Distribution distribution;  // the method's reported estimate
  CategoryCounts calls{};
};

struct Trajectory {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<Option> initial;  // y0 per agent
  std::vector<TrajectoryRound> rounds;

  std::uint64_t total_calls() const {
    std::uint64_t s = 0;
    for (const auto& r : rounds) s += sum(r.calls);
    return s;
  }
  const TrajectoryRound& final_round() const {
    if (rounds.empty()) throw InvariantError("empty trajectory");
    return rounds.back();
  }
};

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : t.rounds)
    rounds.push_back({{"hard", r.hard}, {"distribution", r.distribution}, {"calls", r.calls}});
  return {{"method", t.method}, {"seed", t.seed}, {"initial", t.initial}, {"rounds", rounds}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.method = j.at("method").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.initial = j.at("initial").get<std::vector<Option>>();
  for (const auto& r : j.at("rounds")) {
    TrajectoryRound tr;
    tr.hard = r.at("hard").get<std::vector<Option>>();
    tr.distribution = r.at("distribution").get<Distribution>();
    tr.calls = r.at("calls").get<CategoryCounts>();
    t.rounds.push_back(std::move(tr));
  }
  return t;
}

namespace detail {
inline std::vector<Option> initial_states(std::size_t n, std::span<const Option> initial) {
  if (initial.empty()) return std::vector<Option>(n, kNoState);
  if (initial.size() != n) throw ConfigError("initial state vector length differs from population");
  return {initial.begin(), initial.end()};
}
}  // namespace detail

/// State of a reference rollout after some completed round.
struct ReferenceState {
  std::size_t completed_rounds = 0;
  std::vector<Option> hard;
};

using ReferenceCallback = std::function<void(std::size_t, const TrajectoryRound&)>;

/// Queries every agent at every round with its own recurrent history. With
/// `resume`, continues after resume->completed_rounds; the returned
/// trajectory then holds only the rounds run here.
inline Trajectory run_reference(const RolloutInputs& in, std::size_t rounds, std::span<const Option> initial = {},
                                std::uint64_t seed = 0, const std::optional<ReferenceState>& resume = std::nullopt,
                                const ReferenceCallback& on_round = {}) {
  in.scenario.validate();
  if (rounds < 1 || rounds > in.scenario.stages.size()) throw ConfigError("run.T out of range for scenario");
  const std::size_t n = in.population.n;
  const std::size_t K = in.scenario.option_count();
  Trajectory tr;
  tr.method = "reference";
  tr.seed = seed;
  tr.initial = detail::initial_states(n, initial);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<Option> prev = tr.initial;
  std::size_t start = 1;
  if (resume) {
    if (resume->hard.size() != n) throw ConfigError("checkpoint state does not match this population");
    prev = resume->hard;
    start = resume->completed_rounds + 1;
  }
  for (std::size_t t = start; t <= rounds; ++t) {
    const auto reqs = build_requests(in, all, prev, t, Category::kReference);
    const auto dec = in.oracle.query_batch(reqs);
    TrajectoryRound r;
    r.hard.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.hard[i] = dec[i].option;
    r.distribution = histogram(r.hard, K);
    r.calls[static_cast<std::size_t>(Category::kReference)] = n;
    prev = r.hard;
    if (on_round) on_round(t, r);
    tr.rounds.push_back(std::move(r));
  }
  return tr;
}

/// Converts an engine run into a trajectory reporting projected estimates.
inline Trajectory aps_trajectory(const SimulationResult& sim, std::span<const Option> initial, std::uint64_t seed) {
  Trajectory tr;
  tr.method = "aps";
  tr.seed = seed;
  const std::size_t n = sim.final_state.hard.size();
  tr.initial = detail::initial_states(n, initial);
  for (const auto& rr : sim.rounds) tr.rounds.push_back({rr.hard, rr.projected, rr.calls});
  return tr;
}

// Baselines ------------------------------------------------------------------

enum class BaselineKind { kStratifiedSampling, kClusterAssignment, kLabelPropagation, kMedoidAnchors };

inline const char* to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::kStratifiedSampling: return "stratified-sampling";
    case BaselineKind::kClusterAssignment: return "cluster-assignment";
    case BaselineKind::kLabelPropagation: return "label-propagation";
    case BaselineKind::kMedoidAnchors: return "medoid-anchors";
  }
  return "?";
}

inline BaselineKind baseline_kind_from(const std::string& s) {
  for (auto k : {BaselineKind::kStratifiedSampling, BaselineKind::kClusterAssignment, BaselineKind::kLabelPropagation,
                 BaselineKind::kMedoidAnchors})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown baseline kind '" + s + "'");
}

struct BaselineConfig {
  BaselineKind kind = BaselineKind::kStratifiedSampling;
  std::size_t total_budget = 0;  // over all rounds
  std::size_t rounds = 8;
  std::size_t strata = 0;        // 0: core_stratum_count(n)
  std::size_t kappa = 5;
  std::uint64_t seed = 42;
  ScheduleConfig schedule;
};

/// Even split of `total` over `rounds`; earlier rounds take the remainder.
inline std::vector<std::size_t> split_over_rounds(std::size_t total, std::size_t rounds) {
  std::vector<std::size_t> out(rounds, total / rounds);
  for (std::size_t t = 0; t < total % rounds; ++t) ++out[t];
  return out;
}

namespace detail {

inline Option majority(std::span<const Option> labels, std::size_t k) {
  std::vector<double> c(k, 0.0);
  for (Option y : labels) c[static_cast<std::size_t>(y)] += 1.0;
  return argmax_lowest(c);
}

/// Inverse-distance fill of `targets` from queried `anchors` within one
/// stratum; writes hard and soft.
inline void idw_fill(const Matrix& x, std::span<const std::size_t> anchors, std::span<const std::size_t> targets,
                     std::vector<Option>& hard, Matrix& soft, std::size_t kappa, std::size_t k) {
  for (std::size_t i : targets) {
    std::vector<Support> cand;
    cand.reserve(anchors.size());
    for (std::size_t a : anchors) cand.push_back({a, hard[a], euclidean(x.row(i), x.row(a))});
    auto f = interpolate(std::move(cand), kappa, k);
    hard[i] = f.hard;
    std::copy(f.soft.begin(), f.soft.end(), soft.row(i).begin());
  }
}

/// Anchors allocated across previous-state cells in proportion to cell size.
inline std::vector<std::size_t> state_stratified_anchors(std::span<const std::size_t> members,
                                                         std::span<const Option> prev, std::size_t budget,
                                                         std::size_t k, Rng& rng) {
  std::vector<std::vector<std::size_t>> cells(k + 1);  // last cell: no state
  for (std::size_t i : members) cells[prev[i] == kNoState ? k : static_cast<std::size_t>(prev[i])].push_back(i);
  std::vector<double> w;
  std::vector<std::size_t> caps;
  for (const auto& c : cells) {
    w.push_back(static_cast<double>(c.size()));
    caps.push_back(c.size());
  }
  const auto alloc = largest_remainder(w, budget, caps);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    auto pick = sample_without_replacement(cells[c], alloc[c], rng);
    out.insert(out.end(), pick.begin(), pick.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Nearest-member anchors of `budget` mini-clusters over features plus the
/// previous-state one-hot.
inline std::vector<std::size_t> medoid_anchors(const Matrix& x, std::span<const std::size_t> members,
                                               std::span<const Option> prev, std::size_t budget, std::size_t k,
                                               std::uint64_t seed) {
  if (budget >= members.size()) return {members.begin(), members.end()};
  const std::size_t d = x.cols;
  Matrix aug(members.size(), d + k, 0.0);
  for (std::size_t q = 0; q < members.size(); ++q) {
    const std::size_t i = members[q];
    for (std::size_t j = 0; j < d; ++j) aug(q, j) = x(i, j);
    if (prev[i] != kNoState) aug(q, d + static_cast<std::size_t>(prev[i])) = 1.0;
  }
  std::vector<std::size_t> rows(members.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Matrix centers;
  mini_batch_kmeans(aug, rows, budget, seed, {}, &centers);
  std::vector<bool> used(members.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < budget; ++c) {
    std::size_t best = members.size();
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t q = 0; q < members.size(); ++q) {
      if (used[q]) continue;
      const double dist = squared_distance(aug.row(q), centers.row(c));
      if (dist < bd) {
        bd = dist;
        best = q;
      }
    }
    used[best] = true;
    out.push_back(members[best]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Same-budget baseline rollout. Strata cover all agents (no tail routing);
/// each round's budget is split across strata with one query per non-empty
/// stratum first and the rest in proportion to stratum size.
inline Trajectory run_baseline(const RolloutInputs& in, const BaselineConfig& cfg, std::span<const Option> initial = {}) {
  in.scenario.validate();
  if (cfg.rounds < 1 || cfg.rounds > in.scenario.stages.size()) throw ConfigError("run.T out of range for scenario");
  const std::size_t n = in.population.n;
  const std::size_t K = in.scenario.option_count();
  const Matrix& X = in.population.standardized;
  const std::size_t m_core = std::min(cfg.strata ? cfg.strata : core_stratum_count(n, cfg.schedule), n);
  const StrataAssignment strata = partition(X, {}, m_core, cfg.seed);
  const auto sizes = strata.sizes();
  const auto per_round = split_over_rounds(cfg.total_budget, cfg.rounds);

  Trajectory tr;
  tr.method = to_string(cfg.kind);
  tr.seed = cfg.seed;
  tr.initial = detail::initial_states(n, initial);
  std::vector<Option> prev = tr.initial;
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    if (per_round[t - 1] < m_core) throw ConfigError("baseline budget is below one query per stratum per round");
    const auto alloc = audit_stratum_allocation(sizes, per_round[t - 1]);
    std::vector<std::vector<std::size_t>> anchors(m_core);
    std::vector<std::size_t> queried;
    for (std::size_t m = 0; m < m_core; ++m) {
      const auto& members = strata.members[m];
      Rng rng = keyed_rng(cfg.seed, {stream::kBaseline, t, m});
      switch (cfg.kind) {
        case BaselineKind::kStratifiedSampling:
        case BaselineKind::kClusterAssignment:
          anchors[m] = sample_without_replacement(members, alloc[m], rng);
          std::sort(anchors[m].begin(), anchors[m].end());
          break;
        case BaselineKind::kLabelPropagation:
          anchors[m] = detail::state_stratified_anchors(members, prev, alloc[m], K, rng);
          break;
        case BaselineKind::kMedoidAnchors:
          anchors[m] = detail::medoid_anchors(X, members, prev, alloc[m], K,
                                              derive_seed(cfg.seed, {stream::kBaseline, t, m, 1}));
          break;
      }
      queried.insert(queried.end(), anchors[m].begin(), anchors[m].end());
    }
    std::sort(queried.begin(), queried.end());
    const auto reqs = build_requests(in, queried, prev, t, Category::kCore);
    const auto dec = in.oracle.query_batch(reqs);

    TrajectoryRound r;
    r.hard.assign(n, kNoState);
    Matrix soft(n, K, 0.0);
    for (std::size_t q = 0; q < queried.size(); ++q) {
      r.hard[queried[q]] = dec[q].option;
      soft(queried[q], static_cast<std::size_t>(dec[q].option)) = 1.0;
    }
    r.distribution.assign(K, 0.0);
    for (std::size_t m = 0; m < m_core; ++m) {
      const auto& members = strata.members[m];
      const auto& A = anchors[m];
      std::vector<std::size_t> rest;
      for (std::size_t i : members)
        if (!std::binary_search(A.begin(), A.end(), i)) rest.push_back(i);
      switch (cfg.kind) {
        case BaselineKind::kStratifiedSampling:
        case BaselineKind::kClusterAssignment: {
          std::vector<Option> labels;
          for (std::size_t a : A) labels.push_back(r.hard[a]);
          const Option maj = detail::majority(labels, K);
          for (std::size_t i : rest) {
            r.hard[i] = maj;
            soft(i, static_cast<std::size_t>(maj)) = 1.0;
          }
          if (cfg.kind == BaselineKind::kStratifiedSampling) {
            const auto h = histogram(labels, K);
            const double share = static_cast<double>(members.size()) / static_cast<double>(n);
            for (std::size_t y = 0; y < K; ++y) r.distribution[y] += share * h[y];
          }
          break;
        }
        case BaselineKind::kLabelPropagation:
        case BaselineKind::kMedoidAnchors:
          detail::idw_fill(X, A, rest, r.hard, soft, cfg.kappa, K);
          break;
      }
    }
    if (cfg.kind == BaselineKind::kClusterAssignment) {
      r.distribution = histogram(r.hard, K);
    } else if (cfg.kind != BaselineKind::kStratifiedSampling) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t y = 0; y < K; ++y) r.distribution[y] += soft(i, y) / static_cast<double>(n);
    }
    r.calls[static_cast<std::size_t>(Category::kCore)] = queried.size();
    prev = r.hard;
    tr.rounds.push_back(std::move(r));
  }
  return tr;
}

// Error decomposition --------------------------------------------------------

struct ErrorDecompositionRound {
  double aps_error = 0.0;      // |p_audit - pbar_A|_1
  double context_error = 0.0;  // |pbar_A - pbar_ref|_1
  double total_error = 0.0;    // |p_audit - pbar_ref|_1
  bool bound_holds = true;
};

struct ErrorDecomposition {
  std::vector<ErrorDecompositionRound> rounds;
};

/// Mean true decision distribution over all agents when every agent is
/// prompted with the history `prev` at `round`.
inline Distribution mean_true_distribution(const RolloutInputs& in, std::span<const Option> prev, std::size_t round) {
  const std::size_t n = in.population.n;
  const std::size_t K = in.scenario.option_count();
  Distribution acc(K, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ctx = make_context(in.population, in.scenario, i, prev[i], neighbor_summary(in.graph, prev, i, K), round);
    const auto p = in.oracle.true_distribution(ctx);
    for (std::size_t y = 0; y < K; ++y) acc[y] += p[y] / static_cast<double>(n);
  }
  return acc;
}

inline ErrorDecomposition decompose_error(const RolloutInputs& in, const Trajectory& aps, const Trajectory& reference) {
  if (aps.rounds.size() != reference.rounds.size()) throw ConfigError("trajectories differ in round count");
  ErrorDecomposition out;
  std::vector<Option> prev_a = aps.initial, prev_r = reference.initial;
  for (std::size_t t = 1; t <= aps.rounds.size(); ++t) {
    const auto pa = mean_true_distribution(in, prev_a, t);
    const auto pr = mean_true_distribution(in, prev_r, t);
    const auto& est = aps.rounds[t - 1].distribution;
    ErrorDecompositionRound r;
    r.aps_error = l1_distance(est, pa);
    r.context_error = l1_distance(pa, pr);
    r.total_error = l1_distance(est, pr);
    r.bound_holds = r.total_error <= r.aps_error + r.context_error + 1e-9;
    out.rounds.push_back(r);
    prev_a = aps.rounds[t - 1].hard;
    prev_r = reference.rounds[t - 1].hard;
  }
  return out;
}

// Comparison report ----------------------------------------------------------

struct Comparison {
  std::vector<double> jsd_per_round;
  double final_jsd = 0.0;
  double exact_match = 0.0;
  Interval exact_match_ci;
  Interval final_jsd_ci;
  std::uint64_t method_calls = 0;
  std::uint64_t reference_calls = 0;
  double reduction = 0.0;  // N*T / method calls
};

inline Comparison compare(const Trajectory& method, const Trajectory& reference, std::size_t option_count,
                          std::size_t resamples = 1000, double confidence = 0.95, std::uint64_t seed = 42) {
  if (method.rounds.size() != reference.rounds.size()) throw ConfigError("trajectories differ in round count");
  Comparison c;
  for (std::size_t t = 0; t < method.rounds.size(); ++t)
    c.jsd_per_round.push_back(jsd(method.rounds[t].distribution, reference.rounds[t].distribution));
  c.final_jsd = c.jsd_per_round.back();
  const auto& mh = method.final_round().hard;
  const auto& rh = reference.final_round().hard;
  c.exact_match = exact_match(mh, rh);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < mh.size(); ++i) hits += mh[i] == rh[i];
  c.exact_match_ci = wilson_interval(hits, mh.size(), confidence);
  c.final_jsd_ci = bootstrap_jsd_ci(mh, rh, option_count, resamples, confidence, seed);
  c.method_calls = method.total_calls();
  const std::size_t n = rh.size();
  c.reference_calls = static_cast<std::uint64_t>(n) * reference.rounds.size();
  c.reduction = c.method_calls ? static_cast<double>(c.reference_calls) / static_cast<double>(c.method_calls) : 0.0;
  return c;
}

inline nlohmann::json to_json(const Comparison& c) {
  return {{"jsd_per_round", c.jsd_per_round},
          {"final_jsd", c.final_jsd},
          {"final_jsd_ci", {c.final_jsd_ci.low, c.final_jsd_ci.high}},
          {"exact_match", c.exact_match},
          {"exact_match_ci", {c.exact_match_ci.low, c.exact_match_ci.high}},
          {"method_calls", c.method_calls},
          {"reference_calls", c.reference_calls},
          {"reduction", c.reduction},
          {"jsd_log_base", 2}};
}

}  // namespace aps
