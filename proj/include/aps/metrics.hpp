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

// Distributional and agreement metrics with their reporting intervals.

#include <boost/math/distributions/normal.hpp>

#include "aps/common.hpp"

namespace aps {

/// Jensen-Shannon divergence with base-2 logarithms, so the value lies in
/// [0, 1]. Terms with zero mass contribute 0.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ConfigError("jsd: distributions differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) acc += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(acc, 0.0, 1.0);
}

inline double shannon_entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log2(x);
  return h;
}

/// Fraction of aligned agents whose hard states agree.
inline double exact_match(std::span<const Option> method, std::span<const Option> reference) {
  if (method.size() != reference.size()) throw ConfigError("exact_match: ledgers are not aligned");
  if (method.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < method.size(); ++i) hit += method[i] == reference[i];
  return static_cast<double>(hit) / static_cast<double>(method.size());
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

inline double normal_quantile_two_sided(double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("confidence level must lie in (0,1)");
  boost::math::normal_distribution<double> z;
  return boost::math::quantile(z, 0.5 + confidence / 2.0);
}

/// Wilson score interval for a binomial proportion.
inline Interval wilson_interval(std::size_t successes, std::size_t trials, double confidence = 0.95) {
  if (trials < 1 || successes > trials) throw ConfigError("wilson_interval needs 0 <= successes <= trials, trials >= 1");
  const double z = normal_quantile_two_sided(confidence);
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

namespace detail {
inline Interval percentile_interval(std::vector<double> v, double confidence) {
  std::sort(v.begin(), v.end());
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  const double tail = (1.0 - confidence) / 2.0;
  return {at(tail), at(1.0 - tail)};
}
}  // namespace detail

/// Paired nonparametric bootstrap of the JSD between the label histograms of
/// method and reference, resampling aligned agent pairs.
inline Interval bootstrap_jsd_ci(std::span<const Option> method, std::span<const Option> reference,
                                 std::size_t option_count, std::size_t resamples, double confidence,
                                 std::uint64_t seed) {
  if (method.size() != reference.size() || method.empty()) throw ConfigError("bootstrap needs aligned, non-empty pairs");
  if (resamples < 100) throw ConfigError("bootstrap needs at least 100 resamples");
  Rng rng = keyed_rng(seed, {stream::kBootstrap});
  std::uniform_int_distribution<std::size_t> pick(0, method.size() - 1);
  std::vector<double> stats(resamples);
  std::vector<double> p(option_count), q(option_count);
  const double n = static_cast<double>(method.size());
  for (auto& s : stats) {
    std::fill(p.begin(), p.end(), 0.0);
    std::fill(q.begin(), q.end(), 0.0);
    for (std::size_t i = 0; i < method.size(); ++i) {
      const std::size_t a = pick(rng);
      p[static_cast<std::size_t>(method[a])] += 1.0 / n;
      q[static_cast<std::size_t>(reference[a])] += 1.0 / n;
    }
    s = jsd(p, q);
  }
  return detail::percentile_interval(std::move(stats), confidence);
}

/// Count-only fallback: independent multinomial resamples around the two
/// empirical marginals.
inline Interval multinomial_bootstrap_jsd_ci(std::span<const double> method_counts,
                                             std::span<const double> reference_counts, std::size_t resamples,
                                             double confidence, std::uint64_t seed) {
  if (method_counts.size() != reference_counts.size()) throw ConfigError("marginals differ in length");
  if (resamples < 100) throw ConfigError("bootstrap needs at least 100 resamples");
  Rng rng = keyed_rng(seed, {stream::kBootstrap, 1});
  const auto total = [](std::span<const double> c) { return std::accumulate(c.begin(), c.end(), 0.0); };
  const auto nm = static_cast<std::size_t>(total(method_counts));
  const auto nr = static_cast<std::size_t>(total(reference_counts));
  if (nm == 0 || nr == 0) throw ConfigError("marginals must have positive totals");
  std::discrete_distribution<std::size_t> dm(method_counts.begin(), method_counts.end());
  std::discrete_distribution<std::size_t> dr(reference_counts.begin(), reference_counts.end());
  std::vector<double> stats(resamples), p(method_counts.size()), q(method_counts.size());
  for (auto& s : stats) {
    std::fill(p.begin(), p.end(), 0.0);
    std::fill(q.begin(), q.end(), 0.0);
    for (std::size_t i = 0; i < nm; ++i) p[dm(rng)] += 1.0 / static_cast<double>(nm);
    for (std::size_t i = 0; i < nr; ++i) q[dr(rng)] += 1.0 / static_cast<double>(nr);
    s = jsd(p, q);
  }
  return detail::percentile_interval(std::move(stats), confidence);
}

}  // namespace aps
