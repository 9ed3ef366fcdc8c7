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

// aps: population/graph generation, APS, reference and baseline rollouts,
// evaluation and reporting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "aps/artifacts.hpp"
#include "aps/config.hpp"
#include "aps/http_oracle.hpp"

namespace fs = std::filesystem;
using aps::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::size_t stop_after = 0;  // halt after this many completed rounds, 0 for never
};

/// Thrown from a round callback to halt a run once its checkpoint is on disk.
struct Halt {
  std::size_t round;
};

aps::ConfigFile load_config(const Common& c) {
  aps::ConfigFile cfg = c.config.empty() ? aps::ConfigFile{} : aps::ConfigFile::load(c.config);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed) cfg.set("run.seed", std::to_string(*c.seed));
  if (!c.resume.empty()) cfg.set("run.out", c.resume);
  if (!c.out.empty()) cfg.set("run.out", c.out);
  return cfg;
}

fs::path out_dir(const aps::ConfigFile& cfg) {
  fs::path p = cfg.str("run.out");
  fs::create_directories(p);
  return p;
}

std::unique_ptr<aps::Oracle> make_oracle(const aps::ConfigFile& cfg, const aps::Population& pop,
                                         const aps::Scenario& sc) {
  const auto& kind = cfg.str("oracle.kind");
  if (kind == "synthetic") return std::make_unique<aps::SyntheticKernel>(aps::kernel_config(cfg, pop.spec.dim(), sc));
  if (kind == "scripted") {
    std::ifstream in(cfg.str("oracle.script"));
    if (!in) throw aps::ConfigError("config key 'oracle.script': cannot open '" + cfg.str("oracle.script") + "'");
    return std::make_unique<aps::ScriptedOracle>(aps::ScriptedOracle::from_csv(in));
  }
  if (kind == "http") {
    aps::HttpOracleConfig h;
    h.base_url = cfg.str("oracle.base_url");
    h.model_id = cfg.str("oracle.model_id");
    h.api_key_env = cfg.str("oracle.api_key_env");
    h.max_in_flight = cfg.count("oracle.max_in_flight");
    h.timeout_s = cfg.real("oracle.timeout_s");
    h.retries = cfg.count("oracle.retries");
    h.backoff_base_s = cfg.real("oracle.backoff_base_s");
    h.backoff_cap_s = cfg.real("oracle.backoff_cap_s");
    h.transcript = cfg.str("oracle.transcript");
    if (!cfg.str("oracle.template").empty()) h.prompt = aps::PromptTemplate::from_file(cfg.str("oracle.template"));
    return std::make_unique<aps::HttpOracle>(h);
  }
  throw aps::ConfigError("config key 'oracle.kind': expected synthetic|scripted|http, got '" + kind + "'");
}

struct World {
  aps::Population pop;
  aps::SocialGraph graph;
  aps::Scenario scenario;
  std::unique_ptr<aps::Oracle> oracle;
  std::vector<aps::Option> initial;

  aps::RolloutInputs inputs() { return {pop, graph, scenario, *oracle}; }
};

World build_world(const aps::ConfigFile& cfg) {
  World w;
  w.pop = aps::build_population(cfg);
  w.graph = aps::build_graph(cfg, w.pop.n);
  w.scenario = aps::build_scenario(cfg);
  w.oracle = make_oracle(cfg, w.pop, w.scenario);
  w.initial = aps::initial_states(cfg, w.pop.n, w.scenario.option_count());
  return w;
}

/// Reads a checkpoint and refuses it when the config hash differs.
std::optional<aps::Checkpoint> load_checkpoint(const Common& c, const aps::ConfigFile& cfg) {
  if (c.resume.empty()) return std::nullopt;
  const fs::path p = fs::path(c.resume) / "checkpoint.json";
  auto ck = aps::checkpoint_from_json(aps::read_json(p));
  if (ck.config_hash != aps::hex64(cfg.hash()))
    throw aps::ConfigError("checkpoint " + p.string() + " was written under config hash " + ck.config_hash +
                           ", current config hashes to " + aps::hex64(cfg.hash()) + "; refusing to resume");
  return ck;
}

std::vector<json> kept_records(const fs::path& jsonl, std::size_t completed) {
  std::vector<json> recs;
  if (fs::exists(jsonl))
    for (auto& r : aps::read_jsonl(jsonl))
      if (r.at("round").get<std::size_t>() <= completed) recs.push_back(std::move(r));
  if (recs.size() != completed) throw aps::ConfigError("round log " + jsonl.string() + " is shorter than the checkpoint");
  return recs;
}

void write_run_outputs(const fs::path& dir, const std::string& method, const aps::ConfigFile& cfg, std::size_t n,
                       const std::vector<aps::Option>& initial) {
  const auto recs = aps::read_jsonl(dir / "rounds.jsonl");
  aps::write_json(dir / "summary.json", aps::build_summary(method, cfg, n, recs));
  aps::write_json(dir / "trajectory.json",
                  aps::to_json(aps::trajectory_from_records(method, cfg.u64("run.seed"), initial, recs)));
  aps::write_json(dir / "config.json", cfg.to_json());
}

int cmd_gen_pop(const Common& c) {
  const auto cfg = load_config(c);
  const auto pop = aps::build_population(cfg);
  const auto dir = out_dir(cfg);
  aps::save_population(pop, (dir / "population.bin").string(), (dir / "population.json").string());
  std::cout << "population n=" << pop.n << " d=" << pop.spec.dim() << " -> " << dir.string() << "\n";
  return 0;
}

int cmd_gen_graph(const Common& c) {
  const auto cfg = load_config(c);
  const auto g = aps::build_graph(cfg, cfg.str("population.source") == "file" ? aps::build_population(cfg).n
                                                                               : cfg.count("population.n"));
  const auto dir = out_dir(cfg);
  aps::save_graph(g, (dir / "graph.bin").string(), (dir / "graph.json").string());
  std::cout << "graph n=" << g.n << " k=" << g.k << " checksum=" << aps::hex64(g.checksum()) << "\n";
  return 0;
}

int cmd_run_aps(const Common& c) {
  const auto cfg = load_config(c);
  auto w = build_world(cfg);
  const auto ecfg = aps::engine_config(cfg);
  const auto dir = out_dir(cfg);
  const auto jsonl = dir / "rounds.jsonl";
  const std::string hash = aps::hex64(cfg.hash());
  std::optional<aps::EngineState> resume;
  if (auto ck = load_checkpoint(c, cfg)) {
    aps::write_jsonl(jsonl, kept_records(jsonl, ck->state.completed_rounds));
    w.oracle->ledger().restore(ck->ledger);
    w.oracle->ledger().truncate_from(ck->state.completed_rounds + 1);
    resume = ck->state;
  } else {
    aps::write_jsonl(jsonl, {});
  }
  const std::size_t every = std::max<std::size_t>(1, cfg.count("run.checkpoint_interval"));
  auto in = w.inputs();
  auto on_round = [&](const aps::RoundResult& rr, const aps::EngineState& st) {
    aps::append_jsonl(jsonl, aps::round_record(rr, ecfg));
    const bool halt = c.stop_after != 0 && st.completed_rounds == c.stop_after;
    if (halt || st.completed_rounds % every == 0 || st.completed_rounds == ecfg.rounds)
      aps::write_json(dir / "checkpoint.json", aps::to_json(aps::Checkpoint{hash, st, w.oracle->ledger().to_json()}));
    std::cerr << "round " << rr.round << ": calls " << rr.total_calls() << "\n";
    if (halt) throw Halt{st.completed_rounds};
  };
  aps::SimulationResult sim;
  try {
    sim = aps::run_simulation(in, ecfg, w.initial, resume, on_round);
  } catch (const Halt& h) {
    std::cout << "aps run halted after round " << h.round << " -> " << dir.string() << "\n";
    return 0;
  }
  aps::write_json(dir / "strata.json", aps::strata_json(sim.strata));
  aps::write_json(dir / "ledger.json", w.oracle->ledger().to_json());
  write_run_outputs(dir, "aps", cfg, w.pop.n, w.initial);
  std::cout << "aps run complete -> " << dir.string() << "\n";
  return 0;
}

int cmd_run_reference(const Common& c) {
  const auto cfg = load_config(c);
  auto w = build_world(cfg);
  const auto dir = out_dir(cfg);
  const auto jsonl = dir / "rounds.jsonl";
  const std::string hash = aps::hex64(cfg.hash());
  const std::size_t T = cfg.count("run.T");
  std::optional<aps::ReferenceState> resume;
  if (auto ck = load_checkpoint(c, cfg)) {
    aps::write_jsonl(jsonl, kept_records(jsonl, ck->state.completed_rounds));
    w.oracle->ledger().restore(ck->ledger);
    w.oracle->ledger().truncate_from(ck->state.completed_rounds + 1);
    resume = aps::ReferenceState{ck->state.completed_rounds, ck->state.hard};
  } else {
    aps::write_jsonl(jsonl, {});
  }
  auto in = w.inputs();
  try {
    aps::run_reference(in, T, w.initial, cfg.u64("run.seed"), resume,
                       [&](std::size_t t, const aps::TrajectoryRound& r) {
                         aps::append_jsonl(jsonl, aps::trajectory_round_record(t, r));
                         aps::EngineState st{t, r.hard, {}};
                         aps::write_json(dir / "checkpoint.json",
                                         aps::to_json(aps::Checkpoint{hash, st, w.oracle->ledger().to_json()}));
                         std::cerr << "reference round " << t << "\n";
                         if (c.stop_after != 0 && t == c.stop_after) throw Halt{t};
                       });
  } catch (const Halt& h) {
    std::cout << "reference run halted after round " << h.round << " -> " << dir.string() << "\n";
    return 0;
  }
  write_run_outputs(dir, "reference", cfg, w.pop.n, w.initial);
  std::cout << "reference run complete -> " << dir.string() << "\n";
  return 0;
}

int cmd_run_baseline(const Common& c) {
  const auto cfg = load_config(c);
  auto w = build_world(cfg);
  const auto dir = out_dir(cfg);
  aps::BaselineConfig b;
  b.kind = aps::baseline_kind_from(cfg.str("baseline.kind"));
  b.rounds = cfg.count("run.T");
  b.strata = cfg.count("baseline.strata");
  b.seed = cfg.u64("run.seed");
  b.schedule = aps::schedule_config(cfg);
  b.kappa = b.schedule.kappa;
  b.total_budget = cfg.count("baseline.budget");
  if (b.total_budget == 0) {
    const std::size_t n = w.pop.n;
    const std::size_t m_core = std::min(aps::core_stratum_count(n, b.schedule), n);
    const std::size_t per_round = aps::core_budget(n, b.schedule) +
                                  std::min(aps::tail_count(n, b.schedule), n - m_core) +
                                  aps::audit_budget(n, b.schedule);
    b.total_budget = std::min(per_round, n) * b.rounds;
  }
  auto in = w.inputs();
  const auto tr = aps::run_baseline(in, b, w.initial);
  std::vector<json> recs;
  for (std::size_t t = 0; t < tr.rounds.size(); ++t) recs.push_back(aps::trajectory_round_record(t + 1, tr.rounds[t]));
  aps::write_jsonl(dir / "rounds.jsonl", recs);
  write_run_outputs(dir, tr.method, cfg, w.pop.n, w.initial);
  std::cout << tr.method << " run complete -> " << dir.string() << "\n";
  return 0;
}

aps::Trajectory load_trajectory(const std::string& dir) {
  return aps::trajectory_from_json(aps::read_json(fs::path(dir) / "trajectory.json"));
}

int cmd_evaluate(const std::string& method_dir, const std::string& ref_dir, const std::string& out, std::size_t resamples,
                 std::uint64_t seed) {
  const auto m = load_trajectory(method_dir);
  const auto r = load_trajectory(ref_dir);
  if (r.rounds.empty()) throw aps::ConfigError("reference trajectory is empty");
  const std::size_t K = r.rounds.front().distribution.size();
  const auto cmp = aps::compare(m, r, K, resamples, 0.95, seed);
  json report = aps::to_json(cmp);
  report["method"] = m.method;
  report["reference"] = r.method;
  const fs::path dir = out.empty() ? fs::path(method_dir) : fs::path(out);
  fs::create_directories(dir);
  aps::write_json(dir / "evaluation.json", report);
  std::ofstream csv(dir / "evaluation_rounds.csv");
  csv << "round,jsd,method_calls,reference_calls\n";
  for (std::size_t t = 0; t < m.rounds.size(); ++t)
    csv << t + 1 << "," << cmp.jsd_per_round[t] << "," << aps::sum(m.rounds[t].calls) << ","
        << aps::sum(r.rounds[t].calls) << "\n";
  std::cout << "final JSD " << cmp.final_jsd << " exact match " << cmp.exact_match << " reduction " << cmp.reduction
            << "x\n";
  return 0;
}

int cmd_report(const Common& c, const std::vector<std::size_t>& sizes, const std::vector<std::string>& runs) {
  const auto cfg = load_config(c);
  const auto dir = out_dir(cfg);
  const auto sched = aps::schedule_config(cfg);
  const std::size_t T = cfg.count("run.T");
  if (!sizes.empty()) {
    std::ofstream csv(dir / "call_scaling.csv");
    csv << "n,prototype_rate,core_budget,core_strata,tail_count,audit_budget,calls_per_round,total_calls,"
           "reference_calls,reduction\n";
    for (std::size_t n : sizes) {
      const std::size_t per = aps::core_budget(n, sched) + aps::tail_count(n, sched) + aps::audit_budget(n, sched);
      const std::size_t total = per * T;
      csv << n << "," << aps::prototype_rate(n, sched) << "," << aps::core_budget(n, sched) << ","
          << aps::core_stratum_count(n, sched) << "," << aps::tail_count(n, sched) << ","
          << aps::audit_budget(n, sched) << "," << per << "," << total << "," << n * T << ","
          << static_cast<double>(n * T) / static_cast<double>(total) << "\n";
    }
    std::cout << "wrote " << (dir / "call_scaling.csv").string() << "\n";
  }
  if (!runs.empty()) {
    std::ofstream csv(dir / "drift.csv");
    csv << "run,method,round,jsd,calls\n";
    for (const auto& r : runs) {
      const auto ev = aps::read_json(fs::path(r) / "evaluation.json");
      const auto tr = load_trajectory(r);
      const auto jsds = ev.at("jsd_per_round").get<std::vector<double>>();
      for (std::size_t t = 0; t < jsds.size(); ++t)
        csv << r << "," << tr.method << "," << t + 1 << "," << jsds[t] << "," << aps::sum(tr.rounds[t].calls) << "\n";
    }
    std::cout << "wrote " << (dir / "drift.csv").string() << "\n";
  }
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool resume) {
  sub->add_option("--config", c.config, "config file (flat dotted keys)");
  sub->add_option("--override", c.overrides, "key=value, repeatable");
  sub->add_option("--seed", c.seed, "sets run.seed");
  sub->add_option("--out", c.out, "output directory (sets run.out)");
  if (resume) {
    sub->add_option("--resume", c.resume, "run directory holding checkpoint.json");
    sub->add_option("--stop-after", c.stop_after, "halt after this many completed rounds");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive prototype simulation"};
  app.require_subcommand(1);
  Common c;
  auto* gp = app.add_subcommand("gen-pop", "generate or expand a population");
  add_common(gp, c, false);
  auto* gg = app.add_subcommand("gen-graph", "build the context graph");
  add_common(gg, c, false);
  auto* rr = app.add_subcommand("run-reference", "brute-force rollout");
  add_common(rr, c, true);
  auto* ra = app.add_subcommand("run-aps", "adaptive prototype rollout");
  add_common(ra, c, true);
  auto* rb = app.add_subcommand("run-baseline", "same-budget baseline rollout");
  add_common(rb, c, false);
  auto* ev = app.add_subcommand("evaluate", "compare a run against a reference run");
  std::string method_dir, ref_dir, ev_out;
  std::size_t resamples = 1000;
  std::uint64_t ev_seed = 42;
  ev->add_option("--method", method_dir, "method run directory")->required();
  ev->add_option("--reference", ref_dir, "reference run directory")->required();
  ev->add_option("--out", ev_out, "report directory (default: method directory)");
  ev->add_option("--resamples", resamples, "bootstrap resamples");
  ev->add_option("--seed", ev_seed, "bootstrap seed");
  auto* rp = app.add_subcommand("report", "call-scaling and drift tables");
  add_common(rp, c, false);
  std::vector<std::size_t> sizes;
  std::vector<std::string> runs;
  rp->add_option("--sizes", sizes, "population sizes for the call-scaling table")->delimiter(',');
  rp->add_option("--runs", runs, "evaluated run directories for drift curves")->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gp) return cmd_gen_pop(c);
    if (*gg) return cmd_gen_graph(c);
    if (*rr) return cmd_run_reference(c);
    if (*ra) return cmd_run_aps(c);
    if (*rb) return cmd_run_baseline(c);
    if (*ev) return cmd_evaluate(method_dir, ref_dir, ev_out, resamples, ev_seed);
    if (*rp) return cmd_report(c, sizes, runs);
  } catch (const aps::OracleError& e) {
    std::cerr << "oracle error: " << e.what() << "\n";
    return 3;
  } catch (const aps::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
