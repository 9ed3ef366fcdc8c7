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

// Sublinear scale schedules, robust tail scoring and core stratification.

#include <limits>
#include <optional>

#include "aps/common.hpp"

namespace aps {

/// Scale-schedule parameters. Defaults are the production settings.
struct ScheduleConfig {
  double N_b = 5000;        // baseline scale
  double alpha_b = 0.15;    // baseline prototype rate
  double lambda = 0.6;      // prototype-rate decay exponent
  double M_b = 10;          // baseline core-stratum count
  double eta = 0.5;         // stratum exponent
  double delta_0 = 0.05;    // tail coefficient
  double zeta = 0.4;        // tail exponent
  double gamma = 0.05;      // audit coefficient
  double beta_a = 0.4;      // audit exponent, 1 - lambda by default
  std::size_t A_min = 1;
  std::size_t kappa = 5;    // interpolation support size
  std::optional<double> fixed_rate;  // validation modes bypass the rate schedule

  void validate() const {
    auto open01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!open01(lambda)) throw ConfigError("schedule.lambda must lie in (0,1)");
    if (!open01(eta)) throw ConfigError("schedule.eta must lie in (0,1)");
    if (!open01(zeta)) throw ConfigError("schedule.zeta must lie in (0,1)");
    if (!open01(beta_a)) throw ConfigError("schedule.beta_a must lie in (0,1)");
    if (!(alpha_b > 0.0 && alpha_b <= 1.0)) throw ConfigError("schedule.alpha_b must lie in (0,1]");
    if (fixed_rate && !(*fixed_rate > 0.0 && *fixed_rate <= 1.0)) throw ConfigError("schedule.fixed_rate must lie in (0,1]");
    if (kappa < 1) throw ConfigError("schedule.kappa must be >= 1");
    if (N_b < 1 || M_b < 1 || A_min < 1) throw ConfigError("schedule counts must be >= 1");
    if (delta_0 < 0 || gamma < 0) throw ConfigError("schedule coefficients must be >= 0");
  }
};

namespace detail {
// Guards floor/ceil against pow() landing a hair off an exact integer.
inline double floor_eps(double x) { return std::floor(x + 1e-9 * std::max(1.0, std::abs(x))); }
inline double ceil_eps(double x) { return std::ceil(x - 1e-9 * std::max(1.0, std::abs(x))); }
}  // namespace detail

inline double prototype_rate(std::size_t n, const ScheduleConfig& cfg) {
  if (cfg.fixed_rate) return *cfg.fixed_rate;
  const double N = static_cast<double>(n);
  if (N <= cfg.N_b) return cfg.alpha_b;
  return cfg.alpha_b * std::pow(cfg.N_b / N, cfg.lambda);
}

/// Nominal core-prototype budget ceil(alpha(N) N).
inline std::size_t core_budget(std::size_t n, const ScheduleConfig& cfg) {
  return static_cast<std::size_t>(detail::ceil_eps(prototype_rate(n, cfg) * static_cast<double>(n)));
}

inline std::size_t core_stratum_count(std::size_t n, const ScheduleConfig& cfg) {
  const double N = static_cast<double>(n);
  if (N <= cfg.N_b) return static_cast<std::size_t>(cfg.M_b);
  return static_cast<std::size_t>(detail::floor_eps(cfg.M_b * std::pow(N / cfg.N_b, cfg.eta)));
}

inline std::size_t tail_count(std::size_t n, const ScheduleConfig& cfg) {
  const double N = static_cast<double>(n);
  const double base = cfg.delta_0 * cfg.N_b;
  if (N <= cfg.N_b) return static_cast<std::size_t>(detail::ceil_eps(base));
  return static_cast<std::size_t>(detail::ceil_eps(base * std::pow(N / cfg.N_b, cfg.zeta)));
}

inline std::size_t audit_budget(std::size_t n, const ScheduleConfig& cfg) {
  const double N = static_cast<double>(n);
  const double growth = std::max(1.0, std::pow(N / cfg.N_b, cfg.beta_a));
  const auto a = static_cast<std::size_t>(detail::floor_eps(cfg.gamma * cfg.N_b * growth));
  return std::max(cfg.A_min, a);
}

// Tail scoring ---------------------------------------------------------------

inline constexpr double kMadFloor = 1e-6;

namespace detail {
inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}
}  // namespace detail

/// Robust standardized distance of each row from the coordinate-wise median,
/// with per-column MAD floored at kMadFloor.
inline std::vector<double> tail_scores(const Matrix& x) {
  if (x.rows < 2) throw ConfigError("tail scoring needs at least 2 agents");
  std::vector<double> med(x.cols), mad(x.cols);
  std::vector<double> col(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) {
    for (std::size_t i = 0; i < x.rows; ++i) col[i] = x(i, j);
    med[j] = detail::median(col);
    for (std::size_t i = 0; i < x.rows; ++i) col[i] = std::abs(x(i, j) - med[j]);
    mad[j] = std::max(kMadFloor, detail::median(col));
  }
  std::vector<double> s(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double z = (x(i, j) - med[j]) / mad[j];
      acc += z * z;
    }
    s[i] = std::sqrt(acc);
  }
  return s;
}

/// Indices of the `count` highest scores (ties to the lower index), sorted
/// ascending.
inline std::vector<std::size_t> select_tails(std::span<const double> scores, std::size_t count) {
  count = std::min(count, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Core stratification --------------------------------------------------------

struct KMeansConfig {
  std::size_t batch_size = 4096;
  std::size_t iterations = 100;
};

/// Mini-batch k-means with k-means++ seeding on the given rows of `x`.
/// Returns a label in [0, k) per row in `rows`; every cluster is non-empty.
inline std::vector<int> mini_batch_kmeans(const Matrix& x, std::span<const std::size_t> rows, std::size_t k,
                                          std::uint64_t seed, const KMeansConfig& kc, Matrix* centers_out = nullptr) {
  const std::size_t n = rows.size(), d = x.cols;
  if (k < 1 || n < k) throw ConfigError("k-means needs 1 <= k <= number of points");
  Rng rng = keyed_rng(seed, {stream::kKMeans, k, n});
  Matrix c(k, d);
  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  {
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::size_t pick = first(rng);
    for (std::size_t m = 0; m < k; ++m) {
      std::copy_n(x.row(rows[pick]).begin(), d, c.row(m).begin());
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        d2[i] = std::min(d2[i], squared_distance(x.row(rows[i]), c.row(m)));
        total += d2[i];
      }
      if (m + 1 == k) break;
      if (total <= 0.0) {
        // All remaining points coincide with chosen centers; pick any.
        pick = (pick + 1) % n;
        continue;
      }
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    }
  }
  auto nearest = [&](std::span<const double> p) {
    std::size_t best = 0;
    double bd = squared_distance(p, c.row(0));
    for (std::size_t m = 1; m < k; ++m) {
      const double dd = squared_distance(p, c.row(m));
      if (dd < bd) {
        bd = dd;
        best = m;
      }
    }
    return std::pair{best, bd};
  };
  // Mini-batch updates with per-center learning rate 1/count.
  const std::size_t b = std::min(kc.batch_size, n);
  std::vector<double> counts(k, 0.0);
  std::vector<std::size_t> batch(b), assign(b);
  std::uniform_int_distribution<std::size_t> draw(0, n - 1);
  for (std::size_t it = 0; it < kc.iterations; ++it) {
    for (auto& i : batch) i = draw(rng);
    for (std::size_t q = 0; q < b; ++q) assign[q] = nearest(x.row(rows[batch[q]])).first;
    for (std::size_t q = 0; q < b; ++q) {
      const std::size_t m = assign[q];
      counts[m] += 1.0;
      const double eta = 1.0 / counts[m];
      auto cm = c.row(m);
      const auto p = x.row(rows[batch[q]]);
      for (std::size_t j = 0; j < d; ++j) cm[j] += eta * (p[j] - cm[j]);
    }
  }
  std::vector<int> label(n);
  std::vector<double> dist(n);
  std::vector<std::size_t> size(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto [m, dd] = nearest(x.row(rows[i]));
    label[i] = static_cast<int>(m);
    dist[i] = dd;
    ++size[m];
  }
  // Empty clusters take the point farthest from its center among clusters
  // that can spare one.
  for (std::size_t m = 0; m < k; ++m) {
    if (size[m] > 0) continue;
    std::size_t far = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (size[static_cast<std::size_t>(label[i])] < 2) continue;
      if (far == n || dist[i] > dist[far]) far = i;
    }
    if (far == n) throw InvariantError("k-means could not fill an empty cluster");
    --size[static_cast<std::size_t>(label[far])];
    label[far] = static_cast<int>(m);
    dist[far] = 0.0;
    ++size[m];
  }
  if (centers_out) {
    Matrix mean(k, d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = mean.row(static_cast<std::size_t>(label[i]));
      const auto p = x.row(rows[i]);
      for (std::size_t j = 0; j < d; ++j) row[j] += p[j];
    }
    for (std::size_t m = 0; m < k; ++m)
      for (std::size_t j = 0; j < d; ++j) mean(m, j) /= static_cast<double>(size[m]);
    *centers_out = std::move(mean);
  }
  return label;
}

/// Tail set, tail scores and the fixed core strata of a run.
struct StrataAssignment {
  std::vector<std::size_t> tails;   // sorted ascending
  std::vector<double> scores;       // per agent
  std::vector<int> stratum;         // per agent; -1 for tails
  std::vector<std::vector<std::size_t>> members;  // per stratum, ascending
  Matrix centroids;

  std::size_t stratum_count() const { return members.size(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s;
    for (const auto& m : members) s.push_back(m.size());
    return s;
  }
  bool is_tail(std::size_t agent) const { return stratum.at(agent) < 0; }
};

/// Partitions all non-tail agents into `m_core` strata.
inline StrataAssignment partition(const Matrix& features, std::span<const std::size_t> tail_set, std::size_t m_core,
                                  std::uint64_t seed, const KMeansConfig& kc = {}) {
  if (m_core < 1) throw ConfigError("core stratum count must be >= 1");
  StrataAssignment a;
  a.tails.assign(tail_set.begin(), tail_set.end());
  std::sort(a.tails.begin(), a.tails.end());
  a.stratum.assign(features.rows, -1);
  std::vector<bool> tail(features.rows, false);
  for (std::size_t t : a.tails) tail.at(t) = true;
  std::vector<std::size_t> core;
  for (std::size_t i = 0; i < features.rows; ++i)
    if (!tail[i]) core.push_back(i);
  if (core.empty()) throw ConfigError("no non-tail agents to stratify");
  if (core.size() < m_core) throw ConfigError("fewer non-tail agents than core strata");
  const auto labels = mini_batch_kmeans(features, core, m_core, seed, kc, &a.centroids);
  a.members.assign(m_core, {});
  for (std::size_t q = 0; q < core.size(); ++q) {
    a.stratum[core[q]] = labels[q];
    a.members[static_cast<std::size_t>(labels[q])].push_back(core[q]);
  }
  return a;
}

/// Tail routing and stratification for a population of size n under `cfg`.
/// The tail set is capped so at least one agent remains per core stratum.
inline StrataAssignment stratify(const Matrix& features, const ScheduleConfig& cfg, std::uint64_t seed) {
  const std::size_t n = features.rows;
  const std::size_t m_core = std::min(core_stratum_count(n, cfg), n);
  const std::size_t m_out = std::min(tail_count(n, cfg), n - m_core);
  std::vector<double> scores = n >= 2 ? tail_scores(features) : std::vector<double>(n, 0.0);
  const auto tails = select_tails(scores, m_out);
  StrataAssignment a = partition(features, tails, m_core, seed);
  a.scores = std::move(scores);
  return a;
}

}  // namespace aps
