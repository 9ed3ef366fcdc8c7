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

// Agent populations: declarative mixed-type feature specs, synthetic
// generation, and expansion of a small seed table into a larger population
// by anchored, type-aware perturbation.

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>

#include "aps/common.hpp"
#include "json.hpp"

namespace aps {

enum class FeatureKind { kCategorical, kOrdinal, kContinuous };

inline std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::kCategorical: return "categorical";
    case FeatureKind::kOrdinal: return "ordinal";
    case FeatureKind::kContinuous: return "continuous";
  }
  return "?";
}

inline FeatureKind feature_kind_from(const std::string& s) {
  if (s == "categorical") return FeatureKind::kCategorical;
  if (s == "ordinal") return FeatureKind::kOrdinal;
  if (s == "continuous") return FeatureKind::kContinuous;
  throw ConfigError("unknown feature kind '" + s + "'");
}

struct FeatureDescriptor {
  std::string name;
  FeatureKind kind = FeatureKind::kContinuous;
  std::vector<std::string> categories;  // categorical support, stored as index
  int lo = 0, hi = 0;                   // ordinal range, inclusive
  double lower = 0.0, upper = 1.0;      // continuous bounds

  static FeatureDescriptor categorical(std::string name, std::vector<std::string> support) {
    FeatureDescriptor f;
    f.name = std::move(name);
    f.kind = FeatureKind::kCategorical;
    f.categories = std::move(support);
    return f;
  }
  static FeatureDescriptor ordinal(std::string name, int lo, int hi) {
    FeatureDescriptor f;
    f.name = std::move(name);
    f.kind = FeatureKind::kOrdinal;
    f.lo = lo;
    f.hi = hi;
    return f;
  }
  static FeatureDescriptor continuous(std::string name, double lower, double upper) {
    FeatureDescriptor f;
    f.name = std::move(name);
    f.kind = FeatureKind::kContinuous;
    f.lower = lower;
    f.upper = upper;
    return f;
  }

  /// True when `v` (raw encoding) lies on this feature's support.
  bool admits(double v) const {
    switch (kind) {
      case FeatureKind::kCategorical:
        return v >= 0 && v == std::floor(v) && v < static_cast<double>(categories.size());
      case FeatureKind::kOrdinal:
        return v == std::floor(v) && v >= lo && v <= hi;
      case FeatureKind::kContinuous:
        return std::isfinite(v) && v >= lower && v <= upper;
    }
    return false;
  }

  std::string format(double v) const {
    if (std::isnan(v)) return "unknown";
    switch (kind) {
      case FeatureKind::kCategorical: return categories.at(static_cast<std::size_t>(v));
      case FeatureKind::kOrdinal: return std::to_string(static_cast<long>(v));
      case FeatureKind::kContinuous: {
        std::ostringstream os;
        os.precision(3);
        os << std::fixed << v;
        return os.str();
      }
    }
    return "?";
  }
};

struct FeatureSpec {
  std::vector<FeatureDescriptor> features;

  std::size_t dim() const { return features.size(); }

  void validate() const {
    if (features.empty()) throw ConfigError("feature spec is empty");
    for (const auto& f : features) {
      if (f.name.empty()) throw ConfigError("feature with empty name");
      switch (f.kind) {
        case FeatureKind::kCategorical:
          if (f.categories.empty()) throw ConfigError("feature '" + f.name + "': empty categorical support");
          break;
        case FeatureKind::kOrdinal:
          if (f.lo > f.hi) throw ConfigError("feature '" + f.name + "': ordinal lower > upper");
          break;
        case FeatureKind::kContinuous:
          if (!std::isfinite(f.lower) || !std::isfinite(f.upper) || f.lower > f.upper)
            throw ConfigError("feature '" + f.name + "': continuous bounds must be finite and ordered");
          break;
      }
    }
  }

  /// A default mixed-type spec with `d` features cycling continuous,
  /// ordinal and categorical kinds.
  static FeatureSpec synthetic_default(std::size_t d) {
    FeatureSpec s;
    for (std::size_t j = 0; j < d; ++j) {
      const std::string name = "f" + std::to_string(j);
      switch (j % 3) {
        case 0: s.features.push_back(FeatureDescriptor::continuous(name, -5.0, 5.0)); break;
        case 1: s.features.push_back(FeatureDescriptor::ordinal(name, 1, 10)); break;
        default: s.features.push_back(FeatureDescriptor::categorical(name, {"a", "b", "c", "d"})); break;
      }
    }
    return s;
  }

  static FeatureSpec all_continuous(std::size_t d, double lower = -5.0, double upper = 5.0) {
    FeatureSpec s;
    for (std::size_t j = 0; j < d; ++j)
      s.features.push_back(FeatureDescriptor::continuous("f" + std::to_string(j), lower, upper));
    return s;
  }
};

inline void to_json(nlohmann::json& j, const FeatureDescriptor& f) {
  j = nlohmann::json{{"name", f.name}, {"kind", to_string(f.kind)}};
  switch (f.kind) {
    case FeatureKind::kCategorical: j["categories"] = f.categories; break;
    case FeatureKind::kOrdinal: j["lo"] = f.lo; j["hi"] = f.hi; break;
    case FeatureKind::kContinuous: j["lower"] = f.lower; j["upper"] = f.upper; break;
  }
}

inline void from_json(const nlohmann::json& j, FeatureDescriptor& f) {
  f.name = j.at("name").get<std::string>();
  f.kind = feature_kind_from(j.at("kind").get<std::string>());
  switch (f.kind) {
    case FeatureKind::kCategorical: f.categories = j.at("categories").get<std::vector<std::string>>(); break;
    case FeatureKind::kOrdinal: f.lo = j.at("lo").get<int>(); f.hi = j.at("hi").get<int>(); break;
    case FeatureKind::kContinuous: f.lower = j.at("lower").get<double>(); f.upper = j.at("upper").get<double>(); break;
  }
}

inline void to_json(nlohmann::json& j, const FeatureSpec& s) { j = nlohmann::json{{"features", s.features}}; }
inline void from_json(const nlohmann::json& j, FeatureSpec& s) {
  s.features = j.at("features").get<std::vector<FeatureDescriptor>>();
}

/// Agent population. `raw` uses the encoding of FeatureDescriptor (category
/// index, ordinal integer, continuous value); NaN marks a missing value.
struct Population {
  FeatureSpec spec;
  std::size_t n = 0;
  Matrix raw;
  Matrix standardized;
  std::vector<double> means;
  std::vector<double> sds;
  std::uint64_t seed = 0;
  std::vector<std::size_t> anchors;  // seed record per agent; empty if synthetic

  std::size_t dim() const { return spec.dim(); }
};

/// Fills means, sds and the z-scored matrix. Population sd (ddof 0); zero
/// variance columns and missing entries map to 0.
inline void standardize(Population& pop) {
  const std::size_t n = pop.raw.rows, d = pop.raw.cols;
  pop.means.assign(d, 0.0);
  pop.sds.assign(d, 0.0);
  pop.standardized = Matrix(n, d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = pop.raw(i, j);
      if (std::isnan(v)) continue;
      sum += v;
      ++cnt;
    }
    const double mean = cnt ? sum / static_cast<double>(cnt) : 0.0;
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = pop.raw(i, j);
      if (!std::isnan(v)) ss += (v - mean) * (v - mean);
    }
    const double sd = cnt ? std::sqrt(ss / static_cast<double>(cnt)) : 0.0;
    pop.means[j] = mean;
    pop.sds[j] = sd;
    // A column whose spread is pure rounding noise is treated as constant.
    const bool degenerate = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
    for (std::size_t i = 0; i < n; ++i) {
      const double v = pop.raw(i, j);
      pop.standardized(i, j) = (std::isnan(v) || degenerate) ? 0.0 : (v - mean) / sd;
    }
    if (degenerate) pop.sds[j] = 0.0;
  }
}

inline double destandardize(const Population& pop, std::size_t col, double z) {
  return pop.means.at(col) + pop.sds.at(col) * z;
}

// Synthetic generation -------------------------------------------------------

inline Population generate_synthetic_population(const FeatureSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw ConfigError("population size must be >= 1");
  Population pop;
  pop.spec = spec;
  pop.n = n;
  pop.seed = seed;
  pop.raw = Matrix(n, spec.dim());
  for (std::size_t j = 0; j < spec.dim(); ++j) {
    const auto& f = spec.features[j];
    Rng rng = keyed_rng(seed, {stream::kPopulation, j});
    switch (f.kind) {
      case FeatureKind::kCategorical: {
        std::gamma_distribution<double> g(1.0, 1.0);
        std::vector<double> w(f.categories.size());
        for (double& x : w) x = g(rng) + 1e-3;
        std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
        for (std::size_t i = 0; i < n; ++i) pop.raw(i, j) = static_cast<double>(pick(rng));
        break;
      }
      case FeatureKind::kOrdinal: {
        std::uniform_int_distribution<int> pick(f.lo, f.hi);
        for (std::size_t i = 0; i < n; ++i) pop.raw(i, j) = pick(rng);
        break;
      }
      case FeatureKind::kContinuous: {
        const double span = f.upper - f.lower;
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const double w0 = 0.3 + 0.4 * u(rng);
        const double m0 = f.lower + span * (0.2 + 0.2 * u(rng));
        const double m1 = f.lower + span * (0.6 + 0.2 * u(rng));
        const double s0 = span * (0.04 + 0.06 * u(rng));
        const double s1 = span * (0.04 + 0.06 * u(rng));
        std::normal_distribution<double> c0(m0, s0), c1(m1, s1);
        for (std::size_t i = 0; i < n; ++i) {
          const double v = u(rng) < w0 ? c0(rng) : c1(rng);
          pop.raw(i, j) = std::clamp(v, f.lower, f.upper);
        }
        break;
      }
    }
  }
  standardize(pop);
  return pop;
}

// Seed ingestion -------------------------------------------------------------

struct SeedTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "NaN"; }

/// Linear-interpolation quantile of non-NaN values.
inline double quantile(std::vector<double> v, double q) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

inline SeedTable read_seed_csv(std::istream& in) {
  SeedTable t;
  std::string line;
  if (!std::getline(in, line)) throw IngestError(0, "seed CSV has no header row");
  for (auto& h : detail::split_csv_line(line)) t.header.push_back(detail::trim(h));
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    t.rows.push_back(detail::split_csv_line(line));
  }
  return t;
}

inline SeedTable read_seed_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open seed CSV '" + path + "'");
  return read_seed_csv(in);
}

/// Converts a seed table into the raw encoding of `spec`. Columns are matched
/// by header name; extra columns are ignored. Row indices in errors are
/// 0-based data rows (header excluded).
inline Matrix ingest_records(const SeedTable& table, const FeatureSpec& spec) {
  spec.validate();
  std::vector<std::size_t> col(spec.dim());
  for (std::size_t j = 0; j < spec.dim(); ++j) {
    auto it = std::find(table.header.begin(), table.header.end(), spec.features[j].name);
    if (it == table.header.end()) throw IngestError(0, "header lacks feature column '" + spec.features[j].name + "'");
    col[j] = static_cast<std::size_t>(it - table.header.begin());
  }
  Matrix raw(table.rows.size(), spec.dim());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() != table.header.size())
      throw IngestError(r, "expected " + std::to_string(table.header.size()) + " fields, got " +
                               std::to_string(row.size()));
    for (std::size_t j = 0; j < spec.dim(); ++j) {
      const auto& f = spec.features[j];
      const std::string cell = detail::trim(row[col[j]]);
      if (detail::is_missing(cell)) {
        raw(r, j) = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double v = 0.0;
      if (f.kind == FeatureKind::kCategorical) {
        auto it = std::find(f.categories.begin(), f.categories.end(), cell);
        if (it == f.categories.end()) throw IngestError(r, "'" + cell + "' not in support of '" + f.name + "'");
        v = static_cast<double>(it - f.categories.begin());
      } else {
        try {
          std::size_t used = 0;
          v = std::stod(cell, &used);
          if (used != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
          throw IngestError(r, "'" + cell + "' is not numeric for '" + f.name + "'");
        }
        if (!f.admits(v)) throw IngestError(r, "value " + cell + " outside the range of '" + f.name + "'");
      }
      raw(r, j) = v;
    }
  }
  return raw;
}

// Seed expansion -------------------------------------------------------------

/// Perturbation settings for seed expansion. Defaults are choices; the
/// method names the kernel families but not their parameters.
struct PerturbConfig {
  double categorical_redraw = 0.1;  // probability of redrawing from the cell marginal
  double ordinal_stay = 0.6;        // kernel mass on the seed category; rest split to +-1
  double continuous_scale = 1.0;    // multiplier on the local covariance draw
  double shrinkage = 0.5;           // weight on the diagonal target
  std::size_t neighbors = 10;       // k nearest same-cell seeds for local covariance
  double clip_lower_q = 0.005;
  double clip_upper_q = 0.995;
  std::string cell_feature;  // optional categorical column defining coarse cells

  static PerturbConfig none() {
    PerturbConfig p;
    p.categorical_redraw = 0.0;
    p.ordinal_stay = 1.0;
    p.continuous_scale = 0.0;
    return p;
  }

  void validate() const {
    if (categorical_redraw < 0 || categorical_redraw > 1) throw ConfigError("perturb.categorical_redraw must lie in [0,1]");
    if (ordinal_stay < 0 || ordinal_stay > 1) throw ConfigError("perturb.ordinal_stay must lie in [0,1]");
    if (continuous_scale < 0) throw ConfigError("perturb.continuous_scale must be >= 0");
    if (shrinkage < 0 || shrinkage > 1) throw ConfigError("perturb.shrinkage must lie in [0,1]");
    if (!(clip_lower_q >= 0 && clip_lower_q < clip_upper_q && clip_upper_q <= 1))
      throw ConfigError("perturb quantile clip levels must satisfy 0 <= lower < upper <= 1");
  }
};

/// Draws a neighbouring ordinal value: stay with `stay`, step +-1 with
/// (1-stay)/2 each; out-of-range steps are dropped and the rest renormalised.
inline int ordinal_kernel_step(int v, int lo, int hi, double stay, Rng& rng) {
  const double side = (1.0 - stay) / 2.0;
  const double p_down = v > lo ? side : 0.0;
  const double p_up = v < hi ? side : 0.0;
  const double total = stay + p_down + p_up;
  if (total <= 0.0) return v;
  std::uniform_real_distribution<double> u(0.0, total);
  const double x = u(rng);
  if (x < p_down) return v - 1;
  if (x < p_down + p_up) return v + 1;
  return v;
}

/// Uniform-with-replacement anchor draw used by expand_from_seeds.
inline std::vector<std::size_t> draw_anchors(std::size_t records, std::size_t target_n, std::uint64_t seed) {
  std::vector<std::size_t> anchors(target_n);
  if (target_n == records) {
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    return anchors;
  }
  Rng rng = keyed_rng(seed, {stream::kAnchors});
  std::uniform_int_distribution<std::size_t> pick(0, records - 1);
  for (auto& a : anchors) a = pick(rng);
  return anchors;
}

inline Population expand_from_seeds(const Matrix& seed_raw, const FeatureSpec& spec, std::size_t target_n,
                                    const PerturbConfig& perturb, std::uint64_t seed) {
  spec.validate();
  perturb.validate();
  const std::size_t R = seed_raw.rows, d = spec.dim();
  if (R == 0) throw ConfigError("seed table is empty");
  if (seed_raw.cols != d) throw ConfigError("seed table width does not match feature spec");
  if (target_n < R) throw ConfigError("target_n must be >= number of seed records");
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < d; ++j)
      if (!std::isnan(seed_raw(r, j)) && !spec.features[j].admits(seed_raw(r, j)))
        throw IngestError(r, "value outside support of '" + spec.features[j].name + "'");

  // Coarse cell per record.
  std::vector<long> cell(R, 0);
  if (!perturb.cell_feature.empty()) {
    auto it = std::find_if(spec.features.begin(), spec.features.end(),
                           [&](const FeatureDescriptor& f) { return f.name == perturb.cell_feature; });
    if (it == spec.features.end()) throw ConfigError("cell feature '" + perturb.cell_feature + "' not in spec");
    const auto cj = static_cast<std::size_t>(it - spec.features.begin());
    for (std::size_t r = 0; r < R; ++r) cell[r] = std::isnan(seed_raw(r, cj)) ? -1 : static_cast<long>(seed_raw(r, cj));
  }
  std::map<long, std::vector<std::size_t>> members;
  for (std::size_t r = 0; r < R; ++r) members[cell[r]].push_back(r);

  // Continuous columns in standardized seed space.
  std::vector<std::size_t> cont;
  for (std::size_t j = 0; j < d; ++j)
    if (spec.features[j].kind == FeatureKind::kContinuous) cont.push_back(j);
  std::vector<double> cmean(cont.size(), 0.0), csd(cont.size(), 0.0), qlo(cont.size()), qhi(cont.size());
  Matrix z(R, cont.size(), 0.0);
  for (std::size_t c = 0; c < cont.size(); ++c) {
    std::vector<double> colv(R);
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t r = 0; r < R; ++r) {
      colv[r] = seed_raw(r, cont[c]);
      if (!std::isnan(colv[r])) {
        sum += colv[r];
        ++cnt;
      }
    }
    cmean[c] = cnt ? sum / static_cast<double>(cnt) : 0.0;
    double ss = 0.0;
    for (double v : colv)
      if (!std::isnan(v)) ss += (v - cmean[c]) * (v - cmean[c]);
    csd[c] = cnt ? std::sqrt(ss / static_cast<double>(cnt)) : 0.0;
    for (std::size_t r = 0; r < R; ++r)
      z(r, c) = (std::isnan(colv[r]) || csd[c] == 0.0) ? 0.0 : (colv[r] - cmean[c]) / csd[c];
    qlo[c] = detail::quantile(colv, perturb.clip_lower_q);
    qhi[c] = detail::quantile(colv, perturb.clip_upper_q);
  }

  // Lower Cholesky factor of the shrunk local covariance, per anchor, lazily.
  std::unordered_map<std::size_t, Eigen::MatrixXd> factor_cache;
  auto local_factor = [&](std::size_t r) -> const Eigen::MatrixXd& {
    auto it = factor_cache.find(r);
    if (it != factor_cache.end()) return it->second;
    const std::size_t m = cont.size();
    const auto& pool = members[cell[r]];
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(pool.size());
    for (std::size_t q : pool) dist.emplace_back(squared_distance(z.row(r), z.row(q)), q);
    const std::size_t k = std::min(perturb.neighbors, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    if (k >= 2) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t c = 0; c < m; ++c) mu(static_cast<Eigen::Index>(c)) += z(dist[a].second, c);
      mu /= static_cast<double>(k);
      for (std::size_t a = 0; a < k; ++a) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(m));
        for (std::size_t c = 0; c < m; ++c) v(static_cast<Eigen::Index>(c)) = z(dist[a].second, c);
        v -= mu;
        cov += v * v.transpose();
      }
      cov /= static_cast<double>(k - 1);
    }
    Eigen::MatrixXd shrunk = (1.0 - perturb.shrinkage) * cov;
    shrunk.diagonal() += perturb.shrinkage * cov.diagonal();
    shrunk.diagonal().array() += 1e-12;
    Eigen::LLT<Eigen::MatrixXd> llt(shrunk);
    return factor_cache.emplace(r, llt.matrixL().toDenseMatrix()).first->second;
  };

  // Empirical categorical marginals per cell.
  std::map<std::pair<long, std::size_t>, std::vector<double>> marginals;
  for (std::size_t j = 0; j < d; ++j) {
    if (spec.features[j].kind != FeatureKind::kCategorical) continue;
    for (const auto& [c, rows] : members) {
      std::vector<double> counts(spec.features[j].categories.size(), 0.0);
      for (std::size_t r : rows)
        if (!std::isnan(seed_raw(r, j))) counts[static_cast<std::size_t>(seed_raw(r, j))] += 1.0;
      marginals[{c, j}] = std::move(counts);
    }
  }

  Population pop;
  pop.spec = spec;
  pop.n = target_n;
  pop.seed = seed;
  pop.anchors = draw_anchors(R, target_n, seed);
  pop.raw = Matrix(target_n, d);
  for (std::size_t i = 0; i < target_n; ++i) {
    const std::size_t r = pop.anchors[i];
    Rng rng = keyed_rng(seed, {stream::kPerturb, i});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      const auto& f = spec.features[j];
      const double v = seed_raw(r, j);
      pop.raw(i, j) = v;
      if (std::isnan(v)) continue;
      if (f.kind == FeatureKind::kCategorical && perturb.categorical_redraw > 0.0 && u(rng) < perturb.categorical_redraw) {
        const auto& w = marginals[{cell[r], j}];
        if (f.name != perturb.cell_feature && std::accumulate(w.begin(), w.end(), 0.0) > 0.0) {
          std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
          pop.raw(i, j) = static_cast<double>(pick(rng));
        }
      } else if (f.kind == FeatureKind::kOrdinal && perturb.ordinal_stay < 1.0) {
        pop.raw(i, j) = ordinal_kernel_step(static_cast<int>(v), f.lo, f.hi, perturb.ordinal_stay, rng);
      }
    }
    if (!cont.empty() && perturb.continuous_scale > 0.0) {
      const auto& L = local_factor(r);
      std::normal_distribution<double> g(0.0, 1.0);
      Eigen::VectorXd e(static_cast<Eigen::Index>(cont.size()));
      for (auto& x : e) x = g(rng);
      const Eigen::VectorXd noise = perturb.continuous_scale * (L * e);
      for (std::size_t c = 0; c < cont.size(); ++c) {
        const std::size_t j = cont[c];
        const double v = seed_raw(r, j);
        const double step = noise(static_cast<Eigen::Index>(c)) * csd[c];
        if (std::isnan(v) || step == 0.0) continue;
        const auto& f = spec.features[j];
        const double lo = std::max(qlo[c], f.lower), hi = std::min(qhi[c], f.upper);
        pop.raw(i, j) = std::clamp(v + step, lo, hi);
      }
    }
  }
  standardize(pop);
  return pop;
}

// Persistence: binary column store plus JSON sidecar -------------------------

inline constexpr char kPopulationMagic[8] = {'A', 'P', 'S', 'P', 'O', 'P', '1', '\0'};

inline void save_population(const Population& pop, const std::string& bin_path, const std::string& json_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + bin_path + "'");
  out.write(kPopulationMagic, 8);
  const std::uint64_t n = pop.n, d = pop.dim();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(&d), 8);
  for (const Matrix* m : {&pop.raw, &pop.standardized})
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        const double v = (*m)(i, j);
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
      }
  nlohmann::json side{{"n", pop.n},       {"d", d},         {"seed", pop.seed}, {"spec", pop.spec},
                      {"means", pop.means}, {"sds", pop.sds}, {"anchors", pop.anchors}};
  std::ofstream js(json_path);
  js << side.dump(2) << "\n";
}

inline Population load_population(const std::string& bin_path, const std::string& json_path) {
  std::ifstream js(json_path);
  if (!js) throw ConfigError("cannot read '" + json_path + "'");
  const auto side = nlohmann::json::parse(js);
  Population pop;
  pop.spec = side.at("spec").get<FeatureSpec>();
  pop.n = side.at("n").get<std::size_t>();
  pop.seed = side.at("seed").get<std::uint64_t>();
  pop.means = side.at("means").get<std::vector<double>>();
  pop.sds = side.at("sds").get<std::vector<double>>();
  pop.anchors = side.value("anchors", std::vector<std::size_t>{});
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + bin_path + "'");
  char magic[8];
  in.read(magic, 8);
  if (std::memcmp(magic, kPopulationMagic, 8) != 0) throw ConfigError("'" + bin_path + "' is not a population store");
  std::uint64_t n = 0, d = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  in.read(reinterpret_cast<char*>(&d), 8);
  if (n != pop.n || d != pop.dim()) throw ConfigError("population store and sidecar disagree on shape");
  pop.raw = Matrix(n, d);
  pop.standardized = Matrix(n, d);
  for (Matrix* m : {&pop.raw, &pop.standardized})
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < n; ++i) in.read(reinterpret_cast<char*>(&(*m)(i, j)), sizeof(double));
  if (!in) throw ConfigError("population store truncated");
  return pop;
}

}  // namespace aps
