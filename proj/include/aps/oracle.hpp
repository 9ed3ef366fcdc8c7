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

// Transition oracles. Every oracle answers the same query contract: given an
// agent's prompt context, return one parsed option and count the call in the
// oracle's CallLedger under its category.

#include <array>
#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <utility>

#include "aps/common.hpp"
#include "aps/population.hpp"
#include "aps/socialgraph.hpp"
#include "json.hpp"

namespace aps {

enum class Category : std::size_t { kCore = 0, kTail = 1, kAudit = 2, kReference = 3 };
inline constexpr std::size_t kCategoryCount = 4;

inline const char* to_string(Category c) {
  switch (c) {
    case Category::kCore: return "core";
    case Category::kTail: return "tail";
    case Category::kAudit: return "audit";
    case Category::kReference: return "reference";
  }
  return "?";
}

/// Ordered stages and one option list shared by every stage.
struct Scenario {
  std::string name;
  std::vector<std::string> options;
  std::vector<std::string> stages;

  std::size_t option_count() const { return options.size(); }

  void validate() const {
    if (options.size() < 2) throw ConfigError("scenario needs at least 2 options");
    if (stages.empty()) throw ConfigError("scenario needs at least 1 stage");
  }

  /// Generic K-option scenario with placeholder stage text.
  static Scenario generic(std::size_t options, std::size_t stages) {
    Scenario s;
    s.name = "generic";
    for (std::size_t i = 0; i < options; ++i) s.options.push_back("Option " + std::to_string(i + 1));
    for (std::size_t t = 0; t < stages; ++t) s.stages.push_back("Stage " + std::to_string(t + 1) + " of the event.");
    return s;
  }
};

inline void to_json(nlohmann::json& j, const Scenario& s) {
  j = nlohmann::json{{"name", s.name}, {"options", s.options}, {"stages", s.stages}};
}
inline void from_json(const nlohmann::json& j, Scenario& s) {
  s.name = j.value("name", std::string{});
  s.options = j.at("options").get<std::vector<std::string>>();
  s.stages = j.at("stages").get<std::vector<std::string>>();
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
  Scenario s = nlohmann::json::parse(in).get<Scenario>();
  s.validate();
  return s;
}

/// Everything the oracle sees about one agent at one round. Views point into
/// the population and scenario; the context must not outlive them.
struct PromptContext {
  std::size_t agent = 0;
  std::span<const double> features;  // standardized
  std::span<const double> raw;       // optional, for profile text
  const FeatureSpec* spec = nullptr;
  Option previous = kNoState;
  StateCounts neighbors;
  std::size_t stage = 1;  // 1-based
  const Scenario* scenario = nullptr;

  std::size_t option_count() const { return scenario ? scenario->option_count() : 0; }

  void validate() const {
    if (!scenario) throw InvariantError("context without scenario");
    if (stage < 1 || stage > scenario->stages.size()) throw InvariantError("stage index out of range");
    if (scenario->option_count() < 2) throw InvariantError("option set smaller than 2");
  }
};

inline PromptContext make_context(const Population& pop, const Scenario& scenario, std::size_t agent,
                                  Option previous, StateCounts neighbors, std::size_t stage) {
  PromptContext c;
  c.agent = agent;
  c.features = pop.standardized.row(agent);
  c.raw = pop.raw.row(agent);
  c.spec = &pop.spec;
  c.previous = previous;
  c.neighbors = std::move(neighbors);
  c.stage = stage;
  c.scenario = &scenario;
  return c;
}

struct QueryRequest {
  PromptContext context;
  std::size_t round = 1;
  Category category = Category::kCore;
};

struct Decision {
  Option option = kNoState;
  std::string raw;
  int attempts = 1;
  Category category = Category::kCore;

  bool operator==(const Decision&) const = default;
};

/// Oracle failure that could not be resolved by retries. Never mapped to a
/// random option.
class OracleError : public Error {
 public:
  enum class Kind { kTransport, kUnresolved };
  OracleError(Kind kind, std::size_t agent, std::size_t round, Category category, const std::string& what)
      : Error(std::string(kind == Kind::kTransport ? "transport failure" : "unresolved decision") + " for agent " +
              std::to_string(agent) + " round " + std::to_string(round) + " (" + to_string(category) + "): " + what),
        kind_(kind), agent_(agent), round_(round), category_(category) {}
  Kind kind() const noexcept { return kind_; }
  std::size_t agent() const noexcept { return agent_; }
  std::size_t round() const noexcept { return round_; }
  Category category() const noexcept { return category_; }

 private:
  Kind kind_;
  std::size_t agent_, round_;
  Category category_;
};

// Call ledger ----------------------------------------------------------------

using CategoryCounts = std::array<std::uint64_t, kCategoryCount>;

inline std::uint64_t sum(const CategoryCounts& c) { return std::accumulate(c.begin(), c.end(), std::uint64_t{0}); }

/// Per-round, per-category call counts plus retry and parse-failure counts.
/// Increments are thread-safe.
class CallLedger {
 public:
  CallLedger() = default;
  CallLedger(const CallLedger& o) {
    std::lock_guard lock(o.mu_);
    rounds_ = o.rounds_;
    retries_ = o.retries_;
    parse_failures_ = o.parse_failures_;
  }
  CallLedger& operator=(const CallLedger& o) {
    if (this == &o) return *this;
    std::scoped_lock lock(mu_, o.mu_);
    rounds_ = o.rounds_;
    retries_ = o.retries_;
    parse_failures_ = o.parse_failures_;
    return *this;
  }

  void record(std::size_t round, Category c, std::uint64_t n = 1) {
    std::lock_guard lock(mu_);
    rounds_[round][static_cast<std::size_t>(c)] += n;
  }
  void record_retry(std::size_t round) {
    std::lock_guard lock(mu_);
    ++retries_[round];
  }
  void record_parse_failure(std::size_t round) {
    std::lock_guard lock(mu_);
    ++parse_failures_[round];
  }

  CategoryCounts round_counts(std::size_t round) const {
    std::lock_guard lock(mu_);
    auto it = rounds_.find(round);
    return it == rounds_.end() ? CategoryCounts{} : it->second;
  }
  std::uint64_t retries(std::size_t round) const {
    std::lock_guard lock(mu_);
    auto it = retries_.find(round);
    return it == retries_.end() ? 0 : it->second;
  }
  std::uint64_t parse_failures(std::size_t round) const {
    std::lock_guard lock(mu_);
    auto it = parse_failures_.find(round);
    return it == parse_failures_.end() ? 0 : it->second;
  }

  CategoryCounts totals() const {
    std::lock_guard lock(mu_);
    CategoryCounts t{};
    for (const auto& [r, c] : rounds_)
      for (std::size_t i = 0; i < kCategoryCount; ++i) t[i] += c[i];
    return t;
  }
  std::uint64_t total() const { return sum(totals()); }

  /// Drops rounds >= `round`; used when resuming from a checkpoint taken
  /// after round - 1.
  void truncate_from(std::size_t round) {
    std::lock_guard lock(mu_);
    rounds_.erase(rounds_.lower_bound(round), rounds_.end());
    retries_.erase(retries_.lower_bound(round), retries_.end());
    parse_failures_.erase(parse_failures_.lower_bound(round), parse_failures_.end());
  }

  nlohmann::json to_json() const {
    std::lock_guard lock(mu_);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [r, c] : rounds_) {
      auto rit = retries_.find(r);
      auto pit = parse_failures_.find(r);
      j.push_back({{"round", r},
                   {"core", c[0]},
                   {"tail", c[1]},
                   {"audit", c[2]},
                   {"reference", c[3]},
                   {"retries", rit == retries_.end() ? 0 : rit->second},
                   {"parse_failures", pit == parse_failures_.end() ? 0 : pit->second}});
    }
    return j;
  }

  void restore(const nlohmann::json& j) {
    std::lock_guard lock(mu_);
    rounds_.clear();
    retries_.clear();
    parse_failures_.clear();
    for (const auto& e : j) {
      const auto r = e.at("round").get<std::size_t>();
      rounds_[r] = {e.at("core").get<std::uint64_t>(), e.at("tail").get<std::uint64_t>(),
                    e.at("audit").get<std::uint64_t>(), e.at("reference").get<std::uint64_t>()};
      if (auto v = e.value("retries", std::uint64_t{0})) retries_[r] = v;
      if (auto v = e.value("parse_failures", std::uint64_t{0})) parse_failures_[r] = v;
    }
  }

 private:
  mutable std::mutex mu_;
  std::map<std::size_t, CategoryCounts> rounds_;
  std::map<std::size_t, std::uint64_t> retries_;
  std::map<std::size_t, std::uint64_t> parse_failures_;
};

// Oracle interface -----------------------------------------------------------

class Oracle {
 public:
  virtual ~Oracle() = default;

  Decision query(const QueryRequest& req) {
    req.context.validate();
    Decision d = decide(req);
    d.category = req.category;
    ledger_.record(req.round, req.category);
    return d;
  }

  /// Answers a batch; results are positionally aligned with `reqs` whatever
  /// order the underlying calls complete in.
  std::vector<Decision> query_batch(std::span<const QueryRequest> reqs) {
    for (const auto& r : reqs) r.context.validate();
    std::vector<Decision> out = decide_batch(reqs);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      out[i].category = reqs[i].category;
      ledger_.record(reqs[i].round, reqs[i].category);
    }
    return out;
  }

  /// Exact decision distribution; only inspectable oracles support it.
  virtual Distribution true_distribution(const PromptContext&) const {
    throw CapabilityError("oracle '" + name() + "' has no inspectable decision distribution");
  }

  virtual std::string name() const = 0;

  CallLedger& ledger() { return ledger_; }
  const CallLedger& ledger() const { return ledger_; }

 protected:
  virtual Decision decide(const QueryRequest& req) = 0;

  virtual std::vector<Decision> decide_batch(std::span<const QueryRequest> reqs) {
    std::vector<Decision> out;
    out.reserve(reqs.size());
    for (const auto& r : reqs) out.push_back(decide(r));
    return out;
  }

  CallLedger ledger_;
};

// Synthetic kernel -----------------------------------------------------------

enum class Decoding { kArgmax, kSampled };

struct KernelConfig {
  std::size_t feature_dim = 1;
  std::size_t option_count = 2;
  std::size_t stage_count = 1;
  double temperature = 1.0;
  double feature_gain = 1.0;
  double state_gain = 1.0;
  double neighbor_gain = 1.0;
  double stage_gain = 1.0;
  Decoding decoding = Decoding::kArgmax;
  std::uint64_t seed = 42;
};

/// Softmax-linear transition kernel over the concatenated feature map
/// [standardized features, previous-state one-hot, neighbour fractions,
/// stage one-hot]. Its decision distribution is exact and inspectable.
class SyntheticKernel final : public Oracle {
 public:
  explicit SyntheticKernel(const KernelConfig& cfg) : cfg_(cfg) {
    if (cfg.option_count < 2) throw ConfigError("kernel needs at least 2 options");
    if (!(cfg.temperature > 0.0)) throw ConfigError("kernel temperature must be positive");
    const std::size_t dim = input_dim();
    weights_ = Matrix(cfg.option_count, dim);
    bias_.assign(cfg.option_count, 0.0);
    Rng rng = keyed_rng(cfg.seed, {stream::kKernel});
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
    for (double& w : weights_.data) w = g(rng);
  }

  /// Kernel with explicit weights (option_count x input_dim) and bias.
  SyntheticKernel(const KernelConfig& cfg, Matrix weights, std::vector<double> bias) : cfg_(cfg) {
    if (weights.rows != cfg.option_count || weights.cols != input_dim() || bias.size() != cfg.option_count)
      throw ConfigError("kernel weight shape does not match config");
    weights_ = std::move(weights);
    bias_ = std::move(bias);
  }

  std::size_t input_dim() const { return cfg_.feature_dim + 2 * cfg_.option_count + cfg_.stage_count; }
  const KernelConfig& config() const { return cfg_; }

  std::vector<double> features(const PromptContext& ctx) const {
    if (ctx.features.size() != cfg_.feature_dim) throw InvariantError("context feature width differs from kernel");
    std::vector<double> phi(input_dim(), 0.0);
    std::size_t o = 0;
    for (double x : ctx.features) phi[o++] = cfg_.feature_gain * x;
    if (ctx.previous != kNoState) phi[o + static_cast<std::size_t>(ctx.previous)] = cfg_.state_gain;
    o += cfg_.option_count;
    const auto frac = ctx.neighbors.fractions();
    for (std::size_t k = 0; k < frac.size() && k < cfg_.option_count; ++k) phi[o + k] = cfg_.neighbor_gain * frac[k];
    o += cfg_.option_count;
    if (ctx.stage >= 1 && ctx.stage <= cfg_.stage_count) phi[o + ctx.stage - 1] = cfg_.stage_gain;
    return phi;
  }

  std::vector<double> logits(const PromptContext& ctx) const {
    const auto phi = features(ctx);
    std::vector<double> z(bias_);
    for (std::size_t k = 0; k < cfg_.option_count; ++k) {
      const auto w = weights_.row(k);
      for (std::size_t j = 0; j < phi.size(); ++j) z[k] += w[j] * phi[j];
    }
    return z;
  }

  Distribution true_distribution(const PromptContext& ctx) const override {
    auto z = logits(ctx);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& v : z) {
      v = std::exp((v - m) / cfg_.temperature);
      s += v;
    }
    for (double& v : z) v /= s;
    return z;
  }

  std::string name() const override { return "synthetic"; }

 protected:
  Decision decide(const QueryRequest& req) override {
    const auto p = true_distribution(req.context);
    Decision d;
    if (cfg_.decoding == Decoding::kArgmax) {
      d.option = argmax_lowest(p);
    } else {
      Rng rng = keyed_rng(cfg_.seed, {stream::kOracle, req.context.agent, req.round,
                                      static_cast<std::uint64_t>(req.category)});
      std::discrete_distribution<int> pick(p.begin(), p.end());
      d.option = pick(rng);
    }
    d.raw = "{\"decision\": \"" + std::to_string(d.option + 1) + "\"}";
    return d;
  }

 private:
  KernelConfig cfg_;
  Matrix weights_;
  std::vector<double> bias_;
};

// Scripted replay ------------------------------------------------------------

/// Replays fixed (agent, round) -> option decisions. Unscripted queries are
/// unresolved failures.
class ScriptedOracle final : public Oracle {
 public:
  void set(std::size_t agent, std::size_t round, Option option) { script_[{agent, round}] = option; }

  /// CSV with header "agent,round,option" (0-based option indices).
  static ScriptedOracle from_csv(std::istream& in) {
    ScriptedOracle o;
    std::string line;
    std::getline(in, line);
    std::size_t row = 0;
    while (std::getline(in, line)) {
      if (detail::trim(line).empty()) continue;
      const auto f = detail::split_csv_line(line);
      if (f.size() != 3) throw IngestError(row, "script rows need agent,round,option");
      try {
        o.set(std::stoul(f[0]), std::stoul(f[1]), std::stoi(f[2]));
      } catch (const std::exception&) {
        throw IngestError(row, "non-numeric script entry");
      }
      ++row;
    }
    return o;
  }

  std::string name() const override { return "scripted"; }

 protected:
  Decision decide(const QueryRequest& req) override {
    auto it = script_.find({req.context.agent, req.round});
    if (it == script_.end())
      throw OracleError(OracleError::Kind::kUnresolved, req.context.agent, req.round, req.category, "no scripted decision");
    if (it->second < 0 || static_cast<std::size_t>(it->second) >= req.context.option_count())
      throw OracleError(OracleError::Kind::kUnresolved, req.context.agent, req.round, req.category,
                        "scripted option out of range");
    Decision d;
    d.option = it->second;
    d.raw = "{\"decision\": \"" + std::to_string(it->second + 1) + "\"}";
    return d;
  }

 private:
  std::map<std::pair<std::size_t, std::size_t>, Option> script_;
};

// Prompt rendering -----------------------------------------------------------

inline constexpr const char* kSystemInstruction =
    "You are a rational decision maker; make a judgment based on your background, experience, and all known "
    "information.";

struct PromptTemplate {
  std::string text;

  static const std::vector<std::string>& placeholders() {
    static const std::vector<std::string> names{"profile",     "previous_attitude", "local_social_context",
                                                "round_index", "stage_text",        "options"};
    return names;
  }

  static PromptTemplate generic() {
    return {
        "You are an ordinary online user following this event.\n"
        "\n"
        "Agent profile: {profile}\n"
        "\n"
        "Previous attitude: {previous_attitude}\n"
        "\n"
        "Local social context: {local_social_context}\n"
        "\n"
        "Current event {round_index}: {stage_text}\n"
        "\n"
        "Please choose one option from the following list:\n"
        "{options}\n"
        "\n"
        "Decision requirements: consider your own background and standpoint; consider all previous events rather "
        "than only the current message; your view may change as the event develops.\n"
        "\n"
        "Return JSON only:\n"
        "{\"decision\": \"1\", \"reasoning\": \"brief reason grounded in the agent profile\"}\n"};
  }

  static PromptTemplate from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open prompt template '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    PromptTemplate t{ss.str()};
    t.validate();
    return t;
  }

  void validate() const {
    static const std::regex ph(R"(\{([A-Za-z_][A-Za-z0-9_]*)\})");
    for (auto it = std::sregex_iterator(text.begin(), text.end(), ph); it != std::sregex_iterator(); ++it) {
      const std::string name = (*it)[1];
      const auto& known = placeholders();
      if (std::find(known.begin(), known.end(), name) == known.end())
        throw TemplateError("unknown placeholder {" + name + "}");
    }
  }
};

inline std::string format_profile(const PromptContext& ctx) {
  std::ostringstream os;
  if (ctx.spec && ctx.raw.size() == ctx.spec->dim()) {
    for (std::size_t j = 0; j < ctx.raw.size(); ++j) {
      if (j) os << "; ";
      os << ctx.spec->features[j].name << ": " << ctx.spec->features[j].format(ctx.raw[j]);
    }
  } else {
    os.precision(3);
    os << std::fixed;
    for (std::size_t j = 0; j < ctx.features.size(); ++j) {
      if (j) os << "; ";
      os << "x" << j << ": " << ctx.features[j];
    }
  }
  return os.str();
}

inline std::string render_prompt(const PromptContext& ctx, const PromptTemplate& tmpl) {
  tmpl.validate();
  ctx.validate();
  const Scenario& sc = *ctx.scenario;
  std::map<std::string, std::string> values;
  values["profile"] = format_profile(ctx);
  if (ctx.previous != kNoState)
    values["previous_attitude"] =
        std::to_string(ctx.previous + 1) + ". " + sc.options.at(static_cast<std::size_t>(ctx.previous));
  if (ctx.neighbors.available()) {
    std::ostringstream os;
    os << "among " << ctx.neighbors.total() << " contacts, previous choices were ";
    for (std::size_t k = 0; k < ctx.neighbors.counts.size(); ++k) {
      if (k) os << ", ";
      os << "option " << (k + 1) << ": " << ctx.neighbors.counts[k];
    }
    values["local_social_context"] = os.str();
  }
  values["round_index"] = std::to_string(ctx.stage);
  values["stage_text"] = sc.stages.at(ctx.stage - 1);
  {
    std::ostringstream os;
    for (std::size_t k = 0; k < sc.options.size(); ++k) {
      if (k) os << "\n";
      os << (k + 1) << ". " << sc.options[k];
    }
    values["options"] = os.str();
  }

  static const std::regex ph(R"(\{([A-Za-z_][A-Za-z0-9_]*)\})");
  std::istringstream in(tmpl.text);
  std::string line, out;
  bool skip_blank = false;
  while (std::getline(in, line)) {
    if (skip_blank && line.empty()) {
      skip_blank = false;
      continue;
    }
    skip_blank = false;
    bool drop = false;
    std::string rendered;
    std::size_t last = 0;
    for (auto it = std::sregex_iterator(line.begin(), line.end(), ph); it != std::sregex_iterator(); ++it) {
      const std::string name = (*it)[1];
      auto v = values.find(name);
      if (v == values.end()) {
        drop = true;  // unavailable optional field: omit the whole line
        break;
      }
      rendered += line.substr(last, static_cast<std::size_t>(it->position()) - last);
      rendered += v->second;
      last = static_cast<std::size_t>(it->position() + it->length());
    }
    if (drop) {
      skip_blank = true;
      continue;
    }
    rendered += line.substr(last);
    out += rendered;
    out += '\n';
  }
  return out;
}

// Response parsing -----------------------------------------------------------

/// Extracts the 0-based option from the first JSON object in `raw`. The
/// "decision" field holds the 1-based option number as a string or integer.
inline Option parse_decision(std::string_view raw, std::size_t option_count) {
  if (option_count < 2) throw InvariantError("option_count must be >= 2");
  std::optional<nlohmann::json> obj;
  for (std::size_t start = raw.find('{'); start != std::string_view::npos && !obj; start = raw.find('{', start + 1)) {
    int depth = 0;
    bool in_str = false, esc = false;
    for (std::size_t i = start; i < raw.size(); ++i) {
      const char c = raw[i];
      if (in_str) {
        if (esc) esc = false;
        else if (c == '\\') esc = true;
        else if (c == '"') in_str = false;
        continue;
      }
      if (c == '"') in_str = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) {
        auto j = nlohmann::json::parse(raw.substr(start, i - start + 1), nullptr, false);
        if (!j.is_discarded() && j.is_object()) obj = std::move(j);
        break;
      }
    }
  }
  if (!obj) throw ParseError(ParseError::Kind::kNoObject, "no JSON object in response");
  auto it = obj->find("decision");
  if (it == obj->end()) throw ParseError(ParseError::Kind::kMissingField, "response lacks a \"decision\" field");
  long value = 0;
  if (it->is_number_integer()) {
    value = it->get<long>();
  } else if (it->is_string()) {
    const std::string s = detail::trim(it->get<std::string>());
    if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw ParseError(ParseError::Kind::kMissingField, "decision '" + s + "' is not an option number");
    value = std::stol(s);
  } else {
    throw ParseError(ParseError::Kind::kMissingField, "decision field is neither string nor integer");
  }
  if (value < 1 || value > static_cast<long>(option_count))
    throw ParseError(ParseError::Kind::kOutOfRange,
                     "decision " + std::to_string(value) + " outside 1.." + std::to_string(option_count));
  return static_cast<Option>(value - 1);
}

}  // namespace aps
