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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aps {

// Errors ---------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination of values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A seed record or input file does not conform to its declared schema.
class IngestError : public Error {
 public:
  IngestError(std::size_t row, const std::string& what)
      : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Operation not supported by this oracle (e.g. true_distribution on HTTP).
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

/// Audit design violates a positivity or support requirement.
class DesignError : public Error {
 public:
  using Error::Error;
};

/// Internal invariant broken; indicates a bug rather than bad input.
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// Malformed model response.
class ParseError : public Error {
 public:
  enum class Kind { kNoObject, kMissingField, kOutOfRange };
  ParseError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Options --------------------------------------------------------------------

/// Option indices are 0-based everywhere inside the library. kNoState marks
/// an agent without a previous decision (round 1 with no supplied y0).
using Option = int;
inline constexpr Option kNoState = -1;

using Distribution = std::vector<double>;

inline Option argmax_lowest(std::span<const double> v) {
  if (v.empty()) throw InvariantError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return static_cast<Option>(best);
}

inline Distribution one_hot(Option y, std::size_t k) {
  Distribution v(k, 0.0);
  v.at(static_cast<std::size_t>(y)) = 1.0;
  return v;
}

inline Distribution histogram(std::span<const Option> states, std::size_t k) {
  Distribution p(k, 0.0);
  if (states.empty()) return p;
  for (Option s : states) p.at(static_cast<std::size_t>(s)) += 1.0;
  for (double& x : p) x /= static_cast<double>(states.size());
  return p;
}

inline double l1_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvariantError("l1_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

// Dense row-major matrix -----------------------------------------------------

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

// Seeding --------------------------------------------------------------------

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a key tuple, so
/// each (round, stratum, ...) draw is reproducible without shared RNG state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng keyed_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(seed, keys));
}

// Stream tags for derive_seed; keeps draws of different subsystems apart.
namespace stream {
inline constexpr std::uint64_t kPopulation = 0x706f70;
inline constexpr std::uint64_t kAnchors = 0x616e63;
inline constexpr std::uint64_t kPerturb = 0x707274;
inline constexpr std::uint64_t kGraph = 0x677270;
inline constexpr std::uint64_t kKMeans = 0x6b6d6e;
inline constexpr std::uint64_t kPrototypes = 0x70726f;
inline constexpr std::uint64_t kAudit = 0x617564;
inline constexpr std::uint64_t kOracle = 0x6f7263;
inline constexpr std::uint64_t kKernel = 0x6b726e;
inline constexpr std::uint64_t kBaseline = 0x62736c;
inline constexpr std::uint64_t kBootstrap = 0x627473;
}  // namespace stream

/// Uniform sample of `count` distinct elements from `items` via a partial
/// Fisher-Yates shuffle. Output order is draw order.
template <typename T>
std::vector<T> sample_without_replacement(std::vector<T> items, std::size_t count, Rng& rng) {
  if (count > items.size()) throw InvariantError("sample larger than population");
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
  items.resize(count);
  return items;
}

/// Proportional split of `total` over `weights` with per-entry caps: entries
/// whose share exceeds their cap are pinned there and the excess is spread
/// over the rest in proportion to weight. Returns continuous targets.
inline std::vector<double> water_fill(std::span<const double> weights, double total, std::span<const std::size_t> caps) {
  const std::size_t k = weights.size();
  std::vector<bool> capped(k, false);
  std::vector<double> target(k, 0.0);
  double remaining = total;
  for (;;) {
    double wsum = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      if (!capped[i]) wsum += weights[i];
    bool changed = false;
    for (std::size_t i = 0; i < k; ++i) {
      if (capped[i]) continue;
      target[i] = wsum > 0.0 ? remaining * weights[i] / wsum : 0.0;
      if (target[i] > static_cast<double>(caps[i])) {
        capped[i] = true;
        target[i] = static_cast<double>(caps[i]);
        remaining -= static_cast<double>(caps[i]);
        changed = true;
      }
    }
    if (!changed) break;
  }
  return target;
}

/// Order of entries by descending fractional part of `target`; ties go to
/// the lower index.
inline std::vector<std::size_t> fractional_order(std::span<const double> target) {
  std::vector<std::size_t> order(target.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return target[a] - std::floor(target[a]) > target[b] - std::floor(target[b]);
  });
  return order;
}

/// Largest-remainder apportionment of `total` units across `weights`, with
/// per-entry caps. Ties go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total,
                                                  std::span<const std::size_t> caps) {
  const std::size_t k = weights.size();
  std::size_t cap_sum = 0;
  for (std::size_t c : caps) cap_sum += c;
  total = std::min(total, cap_sum);
  const auto target = water_fill(weights, static_cast<double>(total), caps);
  std::vector<std::size_t> out(k, 0);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = std::min(caps[i], static_cast<std::size_t>(std::floor(target[i])));
    assigned += out[i];
  }
  const auto order = fractional_order(target);
  while (assigned < total) {
    bool progressed = false;
    for (std::size_t i : order) {
      if (assigned == total) break;
      if (out[i] < caps[i]) {
        ++out[i];
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}

/// FNV-1a over raw bytes; used for artifact checksums and config hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace aps
