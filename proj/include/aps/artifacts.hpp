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

// Run artifacts: per-round JSONL records, run summaries, checkpoints and
// strata dumps. Summaries are rebuilt from the JSONL records so a resumed
// run and an uninterrupted one write the same bytes.

#include <filesystem>
#include <fstream>

#include "aps/config.hpp"
#include "aps/engine.hpp"
#include "aps/evaluation.hpp"
#include "json.hpp"

namespace aps {

using nlohmann::json;

inline json to_json(const StratumDiagnostics& d) {
  return {{"audits", d.audits},
          {"mismatch", d.mismatch},
          {"residual_variance", d.residual_variance},
          {"monitoring_jsd", d.monitoring_jsd},
          {"support_distance", d.support_distance},
          {"disagreement_slope", d.disagreement_slope},
          {"rare_recall", d.rare_recall}};
}

inline const char* to_string(AuditBranch b) {
  switch (b) {
    case AuditBranch::kNone: return "none";
    case AuditBranch::kStateStratified: return "state-stratified";
    case AuditBranch::kUniform: return "uniform";
  }
  return "?";
}

inline json calls_json(const CategoryCounts& c) {
  return {{"core", c[0]}, {"tail", c[1]}, {"audit", c[2]}, {"reference", c[3]}, {"total", sum(c)}};
}

inline CategoryCounts calls_from_json(const json& j) {
  return {j.at("core").get<std::uint64_t>(), j.at("tail").get<std::uint64_t>(), j.at("audit").get<std::uint64_t>(),
          j.at("reference").get<std::uint64_t>()};
}

/// One APS round as a JSONL record. Options are 0-based.
inline json round_record(const RoundResult& rr, const EngineConfig& cfg) {
  json diags = json::array(), norm = json::array(), branches = json::array(), supports = json::array(),
       tail_soft = json::array();
  for (const auto& d : rr.diagnostics) diags.push_back(to_json(d));
  for (const auto& d : rr.normalized) norm.push_back(to_json(d));
  for (auto b : rr.design.branch) branches.push_back(to_string(b));
  for (const auto& s : rr.supports) supports.push_back(s);
  for (std::size_t i : rr.tails) tail_soft.push_back(std::vector<double>(rr.soft.row(i).begin(), rr.soft.row(i).end()));
  return {{"round", rr.round},
          {"seeds", {{"run", cfg.seed}, {"audit", cfg.audit_seed}}},
          {"nominal_core_budget", rr.nominal_core_budget},
          {"risks_used", rr.risks_used},
          {"budgets", rr.budgets},
          {"prototypes", rr.prototypes},
          {"tails", rr.tails},
          {"audit",
           {{"budget", audit_budget(rr.hard.size(), cfg.schedule)},
            {"epsilon", rr.design.epsilon},
            {"allocation", rr.design.allocation},
            {"branch", branches},
            {"frame", rr.design.frame},
            {"frame_psi", rr.design.psi},
            {"ids", rr.design.audited},
            {"psi", rr.audit_psi},
            {"labels", rr.audit_labels}}},
          {"estimates", {{"soft_mean", rr.soft_mean}, {"unprojected", rr.unprojected}, {"projected", rr.projected}}},
          {"calls", calls_json(rr.calls)},
          {"diagnostics", diags},
          {"normalized_diagnostics", norm},
          {"risks", rr.risks},
          {"hard", rr.hard},
          {"supports", supports},
          {"tail_soft", tail_soft}};
}

/// Record for a reference or baseline round.
inline json trajectory_round_record(std::size_t round, const TrajectoryRound& r) {
  return {{"round", round}, {"hard", r.hard}, {"distribution", r.distribution}, {"calls", calls_json(r.calls)}};
}

inline std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

inline void append_jsonl(const std::filesystem::path& path, const json& record) {
  std::ofstream out(path, std::ios::app);
  out << record.dump() << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  return json::parse(in);
}

inline json schedule_json(std::size_t n, const ScheduleConfig& s) {
  json j{{"n", n},
         {"N_b", s.N_b},
         {"alpha_b", s.alpha_b},
         {"lambda", s.lambda},
         {"M_b", s.M_b},
         {"eta", s.eta},
         {"delta_0", s.delta_0},
         {"zeta", s.zeta},
         {"gamma", s.gamma},
         {"beta_a", s.beta_a},
         {"A_min", s.A_min},
         {"kappa", s.kappa},
         {"prototype_rate", prototype_rate(n, s)},
         {"core_budget", core_budget(n, s)},
         {"core_strata", core_stratum_count(n, s)},
         {"tail_count", tail_count(n, s)},
         {"audit_budget", audit_budget(n, s)}};
  if (s.fixed_rate) j["fixed_rate"] = *s.fixed_rate;
  return j;
}

inline json strata_json(const StrataAssignment& a) {
  return {{"stratum", a.stratum}, {"tails", a.tails}, {"scores", a.scores}, {"sizes", a.sizes()}};
}

/// Run summary from per-round records. `method` is "aps", "reference" or a
/// baseline kind. Contains no timestamps.
inline json build_summary(const std::string& method, const ConfigFile& cfg, std::size_t n,
                          const std::vector<json>& records) {
  json rounds = json::array();
  CategoryCounts totals{};
  for (const auto& r : records) {
    const auto c = calls_from_json(r.at("calls"));
    for (std::size_t k = 0; k < kCategoryCount; ++k) totals[k] += c[k];
    json e{{"round", r.at("round")}, {"calls", r.at("calls")}};
    if (r.contains("estimates")) {
      e["projected"] = r["estimates"]["projected"];
      e["unprojected"] = r["estimates"]["unprojected"];
      e["risks"] = r["risks"];
      e["budgets"] = r["budgets"];
    } else {
      e["distribution"] = r.at("distribution");
    }
    rounds.push_back(std::move(e));
  }
  json s{{"method", method},
         {"config_hash", hex64(cfg.hash())},
         {"seeds",
          {{"population", cfg.u64("population.seed")},
           {"graph", cfg.u64("graph.seed")},
           {"oracle", cfg.u64("oracle.seed")},
           {"run", cfg.u64("run.seed")},
           {"audit", cfg.u64("run.audit_seed")}}},
         {"schedule", schedule_json(n, schedule_config(cfg))},
         {"n", n},
         {"T", records.size()},
         {"rounds", rounds},
         {"calls", calls_json(totals)},
         {"reference_calls", static_cast<std::uint64_t>(n) * records.size()},
         {"option_index_base", 0},
         {"jsd_log_base", 2}};
  if (!records.empty()) {
    const auto& last = records.back();
    s["final_distribution"] = last.contains("estimates") ? last["estimates"]["projected"] : last["distribution"];
  }
  return s;
}

/// Trajectory view of per-round records (APS records report projected
/// estimates).
inline Trajectory trajectory_from_records(const std::string& method, std::uint64_t seed, std::vector<Option> initial,
                                          const std::vector<json>& records) {
  Trajectory t;
  t.method = method;
  t.seed = seed;
  t.initial = std::move(initial);
  for (const auto& r : records) {
    TrajectoryRound tr;
    tr.hard = r.at("hard").get<std::vector<Option>>();
    tr.distribution = r.contains("estimates") ? r["estimates"]["projected"].get<Distribution>()
                                              : r.at("distribution").get<Distribution>();
    tr.calls = calls_from_json(r.at("calls"));
    t.rounds.push_back(std::move(tr));
  }
  if (t.initial.empty() && !t.rounds.empty()) t.initial.assign(t.rounds.front().hard.size(), kNoState);
  return t;
}

// Checkpoints ----------------------------------------------------------------

struct Checkpoint {
  std::string config_hash;
  EngineState state;
  json ledger;
};

inline json to_json(const Checkpoint& c) {
  return {{"config_hash", c.config_hash}, {"state", to_json(c.state)}, {"ledger", c.ledger}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  return {j.at("config_hash").get<std::string>(), engine_state_from_json(j.at("state")), j.at("ledger")};
}

}  // namespace aps
