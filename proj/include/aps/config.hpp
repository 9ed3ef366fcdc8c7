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

// Run configuration: a flat file of "dotted.key = value" lines with '#'
// comments. Every key has a default; unknown keys are rejected.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "aps/common.hpp"
#include "aps/engine.hpp"
#include "aps/evaluation.hpp"
#include "aps/oracle.hpp"
#include "aps/population.hpp"

namespace aps {

inline const std::map<std::string, std::string>& config_defaults() {
  static const std::map<std::string, std::string> d = {
      {"population.source", "synthetic"},  // synthetic | seeds | file
      {"population.n", "2000"},
      {"population.d", "6"},
      {"population.features", "mixed"},    // mixed | continuous
      {"population.spec", ""},             // JSON FeatureSpec path
      {"population.seed_csv", ""},
      {"population.path", ""},             // stem of a saved population
      {"population.seed", "42"},
      {"perturb.categorical_redraw", "0.1"},
      {"perturb.ordinal_stay", "0.6"},
      {"perturb.continuous_scale", "1.0"},
      {"perturb.shrinkage", "0.5"},
      {"perturb.neighbors", "10"},
      {"perturb.clip_lower_q", "0.005"},
      {"perturb.clip_upper_q", "0.995"},
      {"perturb.cell_feature", ""},
      {"graph.k", "10"},
      {"graph.p", "0.1"},
      {"graph.seed", "42"},
      {"scenario.path", ""},
      {"scenario.options", "5"},
      {"scenario.stages", "8"},
      {"oracle.kind", "synthetic"},  // synthetic | scripted | http
      {"oracle.seed", "42"},
      {"oracle.temperature", "1.0"},
      {"oracle.feature_gain", "1.0"},
      {"oracle.state_gain", "1.0"},
      {"oracle.neighbor_gain", "1.0"},
      {"oracle.stage_gain", "1.0"},
      {"oracle.decoding", "argmax"},  // argmax | sampled
      {"oracle.script", ""},
      {"oracle.base_url", "http://127.0.0.1:8000/v1"},
      {"oracle.model_id", ""},
      {"oracle.max_in_flight", "16"},
      {"oracle.timeout_s", "120"},
      {"oracle.retries", "3"},
      {"oracle.backoff_base_s", "1"},
      {"oracle.backoff_cap_s", "30"},
      {"oracle.api_key_env", "APS_API_KEY"},
      {"oracle.template", ""},
      {"oracle.transcript", ""},
      {"schedule.N_b", "5000"},
      {"schedule.alpha_b", "0.15"},
      {"schedule.lambda", "0.6"},
      {"schedule.M_b", "10"},
      {"schedule.eta", "0.5"},
      {"schedule.delta_0", "0.05"},
      {"schedule.zeta", "0.4"},
      {"schedule.gamma", "0.05"},
      {"schedule.beta_a", "0.4"},
      {"schedule.A_min", "1"},
      {"schedule.kappa", "5"},
      {"schedule.fixed_rate", ""},
      {"risk.lambda_rho", "1"},
      {"risk.lambda_e", "1"},
      {"risk.lambda_r", "1"},
      {"risk.tau", "1e-6"},
      {"audit.epsilon", "0.1"},
      {"audit.rare_threshold", "0.05"},
      {"audit.rare_cell", "0.05"},
      {"allocation.mode", "adaptive"},      // adaptive | proportional
      {"prototype.selection", "uniform"},   // uniform | medoid
      {"run.T", "8"},
      {"run.seed", "42"},
      {"run.audit_seed", "42"},
      {"run.initial_states", ""},
      {"run.out", "runs/default"},
      {"run.checkpoint_interval", "1"},
      {"baseline.kind", "stratified-sampling"},
      {"baseline.budget", "0"},  // total over rounds; 0 matches the APS schedule
      {"baseline.strata", "0"},
  };
  return d;
}

/// Keys that do not affect results and are left out of the config hash.
inline bool hash_exempt(const std::string& key) {
  return key == "run.out" || key == "run.checkpoint_interval" || key == "oracle.transcript" ||
         key == "oracle.max_in_flight" || key == "oracle.api_key_env";
}

class ConfigFile {
 public:
  ConfigFile() : values_(config_defaults()) {}

  static ConfigFile parse(std::istream& in, const std::string& origin = "<config>") {
    ConfigFile c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      c.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return c;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// "key=value" from the command line.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
    }
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
    return v;
  }

  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : values_) {
      if (hash_exempt(k)) continue;
      const std::string line = k + "=" + v + "\n";
      h = fnv1a(line.data(), line.size(), h);
    }
    return h;
  }

  nlohmann::json to_json() const { return nlohmann::json(values_); }

 private:
  std::map<std::string, std::string> values_;
};

// Typed views ----------------------------------------------------------------

inline ScheduleConfig schedule_config(const ConfigFile& c) {
  ScheduleConfig s;
  s.N_b = c.count("schedule.N_b");
  s.alpha_b = c.real("schedule.alpha_b");
  s.lambda = c.real("schedule.lambda");
  s.M_b = c.count("schedule.M_b");
  s.eta = c.real("schedule.eta");
  s.delta_0 = c.real("schedule.delta_0");
  s.zeta = c.real("schedule.zeta");
  s.gamma = c.real("schedule.gamma");
  s.beta_a = c.real("schedule.beta_a");
  s.A_min = c.count("schedule.A_min");
  s.kappa = c.count("schedule.kappa");
  if (!c.str("schedule.fixed_rate").empty()) s.fixed_rate = c.real("schedule.fixed_rate");
  s.validate();
  return s;
}

inline EngineConfig engine_config(const ConfigFile& c) {
  EngineConfig e;
  e.schedule = schedule_config(c);
  e.weights = {c.real("risk.lambda_rho"), c.real("risk.lambda_e"), c.real("risk.lambda_r")};
  e.tau = c.real("risk.tau");
  e.audit.epsilon = c.real("audit.epsilon");
  e.audit.rare_cell = c.real("audit.rare_cell");
  e.rare_threshold = c.real("audit.rare_threshold");
  const auto& mode = c.str("allocation.mode");
  if (mode == "adaptive") e.allocation = AllocationMode::kAdaptive;
  else if (mode == "proportional") e.allocation = AllocationMode::kProportional;
  else throw ConfigError("config key 'allocation.mode': expected adaptive|proportional, got '" + mode + "'");
  const auto& sel = c.str("prototype.selection");
  if (sel == "uniform") e.selection = PrototypeSelection::kUniform;
  else if (sel == "medoid") e.selection = PrototypeSelection::kMedoidFirst;
  else throw ConfigError("config key 'prototype.selection': expected uniform|medoid, got '" + sel + "'");
  e.rounds = c.count("run.T");
  e.seed = c.u64("run.seed");
  e.audit_seed = c.u64("run.audit_seed");
  e.validate();
  return e;
}

inline PerturbConfig perturb_config(const ConfigFile& c) {
  PerturbConfig p;
  p.categorical_redraw = c.real("perturb.categorical_redraw");
  p.ordinal_stay = c.real("perturb.ordinal_stay");
  p.continuous_scale = c.real("perturb.continuous_scale");
  p.shrinkage = c.real("perturb.shrinkage");
  p.neighbors = c.count("perturb.neighbors");
  p.clip_lower_q = c.real("perturb.clip_lower_q");
  p.clip_upper_q = c.real("perturb.clip_upper_q");
  p.cell_feature = c.str("perturb.cell_feature");
  p.validate();
  return p;
}

inline FeatureSpec feature_spec(const ConfigFile& c) {
  const auto& path = c.str("population.spec");
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config key 'population.spec': cannot open " + path);
    FeatureSpec s = nlohmann::json::parse(in).get<FeatureSpec>();
    s.validate();
    return s;
  }
  const std::size_t d = c.count("population.d");
  const auto& kind = c.str("population.features");
  if (kind == "mixed") return FeatureSpec::synthetic_default(d);
  if (kind == "continuous") return FeatureSpec::all_continuous(d);
  throw ConfigError("config key 'population.features': expected mixed|continuous, got '" + kind + "'");
}

inline Population build_population(const ConfigFile& c) {
  const auto& src = c.str("population.source");
  if (src == "synthetic") return generate_synthetic_population(feature_spec(c), c.count("population.n"), c.u64("population.seed"));
  if (src == "seeds") {
    const auto spec = feature_spec(c);
    const auto& csv = c.str("population.seed_csv");
    if (csv.empty()) throw ConfigError("config key 'population.seed_csv' is required for population.source = seeds");
    const Matrix records = ingest_records(read_seed_csv(csv), spec);
    return expand_from_seeds(records, spec, c.count("population.n"), perturb_config(c), c.u64("population.seed"));
  }
  if (src == "file") {
    const auto& stem = c.str("population.path");
    if (stem.empty()) throw ConfigError("config key 'population.path' is required for population.source = file");
    return load_population(stem + ".bin", stem + ".json");
  }
  throw ConfigError("config key 'population.source': expected synthetic|seeds|file, got '" + src + "'");
}

inline SocialGraph build_graph(const ConfigFile& c, std::size_t n) {
  return build_ws_graph(n, c.count("graph.k"), c.real("graph.p"), c.u64("graph.seed"));
}

inline Scenario build_scenario(const ConfigFile& c) {
  const auto& path = c.str("scenario.path");
  Scenario s = path.empty() ? Scenario::generic(c.count("scenario.options"), c.count("scenario.stages")) : load_scenario(path);
  s.validate();
  return s;
}

inline KernelConfig kernel_config(const ConfigFile& c, std::size_t feature_dim, const Scenario& s) {
  KernelConfig k;
  k.feature_dim = feature_dim;
  k.option_count = s.option_count();
  k.stage_count = s.stages.size();
  k.temperature = c.real("oracle.temperature");
  k.feature_gain = c.real("oracle.feature_gain");
  k.state_gain = c.real("oracle.state_gain");
  k.neighbor_gain = c.real("oracle.neighbor_gain");
  k.stage_gain = c.real("oracle.stage_gain");
  const auto& dec = c.str("oracle.decoding");
  if (dec == "argmax") k.decoding = Decoding::kArgmax;
  else if (dec == "sampled") k.decoding = Decoding::kSampled;
  else throw ConfigError("config key 'oracle.decoding': expected argmax|sampled, got '" + dec + "'");
  k.seed = c.u64("oracle.seed");
  return k;
}

/// y0 from a file with one 0-based option per line; empty key means none.
inline std::vector<Option> initial_states(const ConfigFile& c, std::size_t n, std::size_t option_count) {
  const auto& path = c.str("run.initial_states");
  if (path.empty()) return {};
  std::ifstream in(path);
  if (!in) throw ConfigError("config key 'run.initial_states': cannot open " + path);
  std::vector<Option> out;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty()) continue;
    const int v = std::stoi(line);
    if (v < 0 || static_cast<std::size_t>(v) >= option_count)
      throw IngestError(out.size(), "initial state out of option range");
    out.push_back(v);
  }
  if (out.size() != n) throw ConfigError("config key 'run.initial_states': expected " + std::to_string(n) + " states");
  return out;
}

}  // namespace aps
