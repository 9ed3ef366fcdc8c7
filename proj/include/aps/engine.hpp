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

// The adaptive prototype rollout. Each round: allocate prototype budgets
// across strata from last round's residual risk, query prototypes and tail
// agents, interpolate everyone else from same-stratum prototypes, then audit
// a sample of interpolated agents to correct the aggregate and rescore the
// strata.

#include <functional>
#include <optional>

#include "aps/audit.hpp"
#include "aps/common.hpp"
#include "aps/oracle.hpp"
#include "aps/population.hpp"
#include "aps/socialgraph.hpp"
#include "aps/stratification.hpp"
#include "json.hpp"

namespace aps {

enum class AllocationMode { kAdaptive, kProportional };
enum class PrototypeSelection { kUniform, kMedoidFirst };

struct EngineConfig {
  ScheduleConfig schedule;
  RiskWeights weights;
  double tau = 1e-6;
  AuditSamplingConfig audit;
  double rare_threshold = 0.05;  // rare shadow-label share for recall
  AllocationMode allocation = AllocationMode::kAdaptive;
  PrototypeSelection selection = PrototypeSelection::kUniform;
  std::size_t rounds = 8;
  std::uint64_t seed = 42;        // stratification and prototype draws
  std::uint64_t audit_seed = 42;  // audit designs

  void validate() const {
    schedule.validate();
    if (!(tau > 0.0)) throw ConfigError("risk.tau must be > 0");
    if (rounds < 1) throw ConfigError("run.T must be >= 1");
    if (!(audit.epsilon > 0.0 && audit.epsilon <= 1.0)) throw ConfigError("audit.epsilon must lie in (0,1]");
  }
};

/// Shared, read-only inputs of a rollout.
struct RolloutInputs {
  const Population& population;
  const SocialGraph& graph;
  const Scenario& scenario;
  Oracle& oracle;
};

// Budget allocation ----------------------------------------------------------

/// Continuous residual-aware allocation b * |C_m| sqrt(R_m + tau) / sum.
inline std::vector<double> continuous_allocation(double b_core, std::span<const std::size_t> sizes,
                                                 std::span<const double> risks, double tau) {
  std::vector<double> w(sizes.size());
  double s = 0.0;
  for (std::size_t m = 0; m < sizes.size(); ++m) {
    w[m] = static_cast<double>(sizes[m]) * std::sqrt(risks[m] + tau);
    s += w[m];
  }
  for (double& x : w) x = s > 0.0 ? b_core * x / s : 0.0;
  return w;
}

/// Integer per-stratum prototype budgets. Every non-empty stratum gets one
/// prototype when b_core covers the non-empty strata, remaining slots follow
/// the capped continuous allocation with largest-fractional-part rounding.
/// When b_core is smaller than the number of non-empty strata, the
/// largest-weight strata get one prototype each.
inline std::vector<std::size_t> allocate_budgets(std::size_t b_core, std::span<const std::size_t> sizes,
                                                 std::span<const double> risks, double tau) {
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (sizes.size() != risks.size()) throw InvariantError("sizes and risks differ in length");
  for (double r : risks)
    if (!(r >= 0.0)) throw ConfigError("risk scores must be >= 0");
  const std::size_t k = sizes.size();
  std::vector<double> w(k);
  std::size_t nonempty = 0, total = 0;
  for (std::size_t m = 0; m < k; ++m) {
    w[m] = static_cast<double>(sizes[m]) * std::sqrt(risks[m] + tau);
    nonempty += sizes[m] > 0;
    total += sizes[m];
  }
  std::vector<std::size_t> out(k, 0);
  if (b_core < nonempty) {
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    std::size_t left = b_core;
    for (std::size_t m : order) {
      if (left == 0) break;
      if (sizes[m] == 0) continue;
      out[m] = 1;
      --left;
    }
    return out;
  }
  const std::size_t b_eff = std::min(b_core, total);
  const auto target = water_fill(w, static_cast<double>(b_eff), sizes);
  std::size_t assigned = 0;
  for (std::size_t m = 0; m < k; ++m) {
    if (sizes[m] == 0) continue;
    out[m] = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(target[m])), 1, sizes[m]);
    assigned += out[m];
  }
  const auto order = fractional_order(target);
  while (assigned < b_eff) {
    bool progressed = false;
    for (std::size_t m : order) {
      if (assigned == b_eff) break;
      if (out[m] < sizes[m]) {
        ++out[m];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}

// Prototype selection --------------------------------------------------------

/// Uniform draw without replacement keyed by (seed, round, stratum).
/// Returns ascending agent ids.
inline std::vector<std::size_t> select_prototypes(std::span<const std::size_t> members, std::size_t budget,
                                                  std::size_t round, std::size_t stratum, std::uint64_t seed) {
  if (budget > members.size()) throw InvariantError("prototype budget exceeds stratum size");
  Rng rng = keyed_rng(seed, {stream::kPrototypes, round, stratum});
  auto pick = sample_without_replacement(std::vector<std::size_t>(members.begin(), members.end()), budget, rng);
  std::sort(pick.begin(), pick.end());
  return pick;
}

// Local response surface -----------------------------------------------------

/// A queried same-stratum prototype as seen from the agent being filled.
struct Support {
  std::size_t agent = 0;
  Option option = kNoState;
  double distance = 0.0;
};

struct Interpolation {
  Distribution soft;
  Option hard = kNoState;
  std::vector<Support> supports;  // the kappa used, nearest first
  std::vector<double> weights;
};

inline constexpr double kDistanceOffset = 1e-6;

/// Inverse-distance vote of the kappa nearest supports (ties to the lower
/// prototype id); hard state is the argmax with lowest-option tie-break.
inline Interpolation interpolate(std::vector<Support> candidates, std::size_t kappa, std::size_t option_count) {
  if (candidates.empty()) throw InvariantError("interpolation without any queried prototype");
  if (kappa < 1) throw ConfigError("kappa must be >= 1");
  const std::size_t k = std::min(kappa, candidates.size());
  auto closer = [](const Support& a, const Support& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.agent < b.agent);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), closer);
  candidates.resize(k);
  Interpolation out;
  out.soft.assign(option_count, 0.0);
  double total = 0.0;
  for (const auto& s : candidates) {
    out.weights.push_back(1.0 / (s.distance + kDistanceOffset));
    total += out.weights.back();
  }
  for (std::size_t q = 0; q < k; ++q) {
    out.weights[q] /= total;
    out.soft[static_cast<std::size_t>(candidates[q].option)] += out.weights[q];
  }
  out.hard = argmax_lowest(out.soft);
  out.supports = std::move(candidates);
  return out;
}

// Rounds ---------------------------------------------------------------------

struct RoundResult {
  std::size_t round = 0;
  std::size_t nominal_core_budget = 0;
  std::vector<double> risks_used;         // R_{m,t-1}
  std::vector<std::size_t> budgets;       // B_{m,t}
  std::vector<std::size_t> prototypes;    // S_t, ascending
  std::vector<std::size_t> tails;         // O_N
  AuditDesign design;
  std::vector<Option> audit_labels;       // aligned with design.audited
  std::vector<double> audit_psi;          // aligned with design.audited
  Distribution soft_mean;                 // baseline term of the estimator
  Distribution unprojected;
  Distribution projected;
  CategoryCounts calls{};
  std::vector<StratumDiagnostics> diagnostics;  // raw
  std::vector<StratumDiagnostics> normalized;
  std::vector<double> risks;              // R_{m,t}
  std::vector<Option> hard;               // all agents, this round
  Matrix soft;                            // N x K
  std::vector<std::vector<std::size_t>> supports;  // per agent; empty if queried directly

  std::uint64_t total_calls() const { return sum(calls); }
};

/// Recurrent state carried between rounds; enough to resume exactly.
struct EngineState {
  std::size_t completed_rounds = 0;
  std::vector<Option> hard;
  std::vector<double> risks;
};

inline std::vector<QueryRequest> build_requests(const RolloutInputs& in, std::span<const std::size_t> agents,
                                                std::span<const Option> prev_hard, std::size_t round,
                                                Category category) {
  std::vector<QueryRequest> reqs;
  reqs.reserve(agents.size());
  const std::size_t k = in.scenario.option_count();
  for (std::size_t i : agents) {
    reqs.push_back({make_context(in.population, in.scenario, i, prev_hard[i],
                                 neighbor_summary(in.graph, prev_hard, i, k), round),
                    round, category});
  }
  return reqs;
}

inline RoundResult run_round(const RolloutInputs& in, const StrataAssignment& strata, const EngineConfig& cfg,
                             const EngineState& prev, std::size_t round) {
  const std::size_t n = in.population.n;
  const std::size_t K = in.scenario.option_count();
  const std::size_t M = strata.stratum_count();
  if (prev.hard.size() != n) throw InvariantError("previous hard ledger incomplete");
  if (round > in.scenario.stages.size()) throw ConfigError("scenario has fewer stages than rounds");
  const Matrix& X = in.population.standardized;

  RoundResult rr;
  rr.round = round;
  rr.risks_used = prev.risks;
  rr.tails = strata.tails;
  rr.hard.assign(n, kNoState);
  rr.soft = Matrix(n, K, 0.0);
  rr.supports.assign(n, {});

  // Budgets and prototypes.
  const auto sizes = strata.sizes();
  rr.nominal_core_budget = core_budget(n, cfg.schedule);
  std::vector<double> alloc_risk =
      cfg.allocation == AllocationMode::kAdaptive ? prev.risks : std::vector<double>(M, 1.0);
  rr.budgets = allocate_budgets(rr.nominal_core_budget, sizes, alloc_risk, cfg.tau);
  std::vector<std::vector<std::size_t>> protos(M);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& members = strata.members[m];
    if (cfg.selection == PrototypeSelection::kMedoidFirst && rr.budgets[m] > 0) {
      std::size_t medoid = members.front();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i : members) {
        const double d = squared_distance(X.row(i), strata.centroids.row(m));
        if (d < best) {
          best = d;
          medoid = i;
        }
      }
      std::vector<std::size_t> rest;
      for (std::size_t i : members)
        if (i != medoid) rest.push_back(i);
      protos[m] = select_prototypes(rest, rr.budgets[m] - 1, round, m, cfg.seed);
      protos[m].insert(std::upper_bound(protos[m].begin(), protos[m].end(), medoid), medoid);
    } else {
      protos[m] = select_prototypes(members, rr.budgets[m], round, m, cfg.seed);
    }
    rr.prototypes.insert(rr.prototypes.end(), protos[m].begin(), protos[m].end());
  }
  std::sort(rr.prototypes.begin(), rr.prototypes.end());

  // Direct queries: prototypes (core) and tails, merged in agent order.
  {
    std::vector<QueryRequest> reqs;
    auto core_reqs = build_requests(in, rr.prototypes, prev.hard, round, Category::kCore);
    auto tail_reqs = build_requests(in, rr.tails, prev.hard, round, Category::kTail);
    reqs.reserve(core_reqs.size() + tail_reqs.size());
    std::merge(std::make_move_iterator(core_reqs.begin()), std::make_move_iterator(core_reqs.end()),
               std::make_move_iterator(tail_reqs.begin()), std::make_move_iterator(tail_reqs.end()),
               std::back_inserter(reqs),
               [](const QueryRequest& a, const QueryRequest& b) { return a.context.agent < b.context.agent; });
    const auto decisions = in.oracle.query_batch(reqs);
    for (std::size_t q = 0; q < reqs.size(); ++q) {
      const std::size_t i = reqs[q].context.agent;
      rr.hard[i] = decisions[q].option;
      rr.soft(i, static_cast<std::size_t>(decisions[q].option)) = 1.0;
    }
    rr.calls[static_cast<std::size_t>(Category::kCore)] = rr.prototypes.size();
    rr.calls[static_cast<std::size_t>(Category::kTail)] = rr.tails.size();
  }

  // Same-stratum interpolation for non-prototype core agents. Tail agents
  // are never supports: candidates come from protos[m] only.
  std::vector<std::vector<std::size_t>> frames(M);
  std::vector<std::vector<Support>> support_detail(n);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& P = protos[m];
    for (std::size_t i : strata.members[m]) {
      if (std::binary_search(P.begin(), P.end(), i)) continue;
      frames[m].push_back(i);
      std::vector<Support> cand;
      cand.reserve(P.size());
      for (std::size_t p : P) cand.push_back({p, rr.hard[p], euclidean(X.row(i), X.row(p))});
      auto fill = interpolate(std::move(cand), cfg.schedule.kappa, K);
      rr.hard[i] = fill.hard;
      std::copy(fill.soft.begin(), fill.soft.end(), rr.soft.row(i).begin());
      for (const auto& s : fill.supports) rr.supports[i].push_back(s.agent);
      support_detail[i] = std::move(fill.supports);
    }
  }

  // Shadow audit on the correction frame. Labels never touch rr.hard.
  rr.design = sample_audit_set(frames, audit_budget(n, cfg.schedule), rr.hard, K, cfg.audit, cfg.audit_seed, round);
  {
    const auto reqs = build_requests(in, rr.design.audited, prev.hard, round, Category::kAudit);
    const auto decisions = in.oracle.query_batch(reqs);
    for (const auto& d : decisions) rr.audit_labels.push_back(d.option);
    for (std::size_t i : rr.design.audited) rr.audit_psi.push_back(rr.design.inclusion(i));
    rr.calls[static_cast<std::size_t>(Category::kAudit)] = rr.design.audited.size();
  }

  // Diagnostics and next-round risk.
  std::vector<std::vector<AuditObservation>> obs(M);
  for (std::size_t q = 0; q < rr.design.audited.size(); ++q) {
    const std::size_t i = rr.design.audited[q];
    AuditObservation o;
    o.agent = i;
    o.predicted = rr.hard[i];
    o.shadow = rr.audit_labels[q];
    o.soft.assign(rr.soft.row(i).begin(), rr.soft.row(i).end());
    for (const auto& s : support_detail[i]) {
      o.support_distances.push_back(s.distance);
      o.support_options.push_back(s.option);
    }
    obs[static_cast<std::size_t>(strata.stratum[i])].push_back(std::move(o));
  }
  rr.diagnostics.resize(M);
  for (std::size_t m = 0; m < M; ++m) rr.diagnostics[m] = compute_diagnostics(obs[m], K, cfg.rare_threshold);
  rr.normalized = normalize_diagnostics(rr.diagnostics);
  rr.risks.resize(M);
  for (std::size_t m = 0; m < M; ++m)
    rr.risks[m] = rr.diagnostics[m].audits == 0 ? prev.risks[m] : risk_score(rr.normalized[m], cfg.weights);

  // Estimates.
  rr.soft_mean.assign(K, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < K; ++y) rr.soft_mean[y] += rr.soft(i, y);
  for (double& v : rr.soft_mean) v /= static_cast<double>(n);
  rr.unprojected = audit_correct(rr.soft, rr.design.audited, rr.audit_labels, rr.audit_psi);
  rr.projected = project_simplex(rr.unprojected);
  return rr;
}

struct SimulationResult {
  StrataAssignment strata;
  std::vector<RoundResult> rounds;  // rounds run by this call
  EngineState final_state;
};

using RoundCallback = std::function<void(const RoundResult&, const EngineState&)>;

/// Runs rounds completed+1..cfg.rounds. `resume`, when given, is the state
/// after some completed round; strata are recomputed deterministically.
/// `initial` supplies y0 per agent (empty: no previous state at round 1).
inline SimulationResult run_simulation(const RolloutInputs& in, const EngineConfig& cfg,
                                       std::span<const Option> initial = {},
                                       const std::optional<EngineState>& resume = std::nullopt,
                                       const RoundCallback& on_round = {}) {
  cfg.validate();
  in.scenario.validate();
  const std::size_t n = in.population.n;
  if (cfg.rounds > in.scenario.stages.size()) throw ConfigError("scenario has fewer stages than run.T");
  SimulationResult out;
  out.strata = stratify(in.population.standardized, cfg.schedule, cfg.seed);
  EngineState state;
  if (resume) {
    state = *resume;
    if (state.hard.size() != n || state.risks.size() != out.strata.stratum_count())
      throw ConfigError("checkpoint state does not match this population");
  } else {
    state.hard.assign(n, kNoState);
    if (!initial.empty()) {
      if (initial.size() != n) throw ConfigError("initial state vector length differs from population");
      state.hard.assign(initial.begin(), initial.end());
    }
    state.risks.assign(out.strata.stratum_count(), 1.0);
  }
  for (std::size_t t = state.completed_rounds + 1; t <= cfg.rounds; ++t) {
    RoundResult rr = run_round(in, out.strata, cfg, state, t);
    state.completed_rounds = t;
    state.hard = rr.hard;
    state.risks = rr.risks;
    if (on_round) on_round(rr, state);
    out.rounds.push_back(std::move(rr));
  }
  out.final_state = std::move(state);
  return out;
}

inline nlohmann::json to_json(const EngineState& s) {
  return {{"completed_rounds", s.completed_rounds}, {"hard", s.hard}, {"risks", s.risks}};
}

inline EngineState engine_state_from_json(const nlohmann::json& j) {
  EngineState s;
  s.completed_rounds = j.at("completed_rounds").get<std::size_t>();
  s.hard = j.at("hard").get<std::vector<Option>>();
  s.risks = j.at("risks").get<std::vector<double>>();
  return s;
}

}  // namespace aps
