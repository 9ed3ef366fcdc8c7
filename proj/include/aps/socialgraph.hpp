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

#include <cstring>
#include <fstream>
#include <string>

#include "aps/common.hpp"
#include "json.hpp"

namespace aps {

/// Fixed small-world context graph stored as an n x k_g neighbour array.
/// Row i lists the k_g/2 left ring neighbours followed by the k_g/2 right
/// slots (possibly rewired). The graph is directed as stored.
struct SocialGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  double p_rewire = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::int32_t> neighbors;

  std::span<const std::int32_t> row(std::size_t i) const { return {neighbors.data() + i * k, k}; }

  std::uint64_t checksum() const { return fnv1a(neighbors.data(), neighbors.size() * sizeof(std::int32_t)); }
};

inline SocialGraph build_ws_graph(std::size_t n, std::size_t k, double p_rewire, std::uint64_t seed) {
  if (k == 0 || k % 2 != 0) throw ConfigError("graph degree k_g must be even and positive");
  if (k >= n) throw ConfigError("graph degree k_g must be smaller than n");
  if (!(p_rewire >= 0.0 && p_rewire <= 1.0)) throw ConfigError("rewiring probability must lie in [0,1]");
  SocialGraph g{n, k, p_rewire, seed, std::vector<std::int32_t>(n * k)};
  const std::size_t half = k / 2;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t s = 0; s < half; ++s) {
      g.neighbors[i * k + s] = static_cast<std::int32_t>((i + n - half + s) % n);
      g.neighbors[i * k + half + s] = static_cast<std::int32_t>((i + 1 + s) % n);
    }
  }
  Rng rng = keyed_rng(seed, {stream::kGraph});
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> target(0, n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::int32_t* row = g.neighbors.data() + i * k;
    for (std::size_t s = half; s < k; ++s) {
      if (coin(rng) >= p_rewire) continue;
      // Collisions with self or an existing row entry are redrawn; after 100
      // failed attempts the ring edge is kept.
      for (int attempt = 0; attempt < 100; ++attempt) {
        const auto t = static_cast<std::int32_t>(target(rng));
        if (static_cast<std::size_t>(t) == i || std::find(row, row + k, t) != row + k) continue;
        row[s] = t;
        break;
      }
    }
  }
  return g;
}

/// Counts of neighbours' previous hard states, in option order. Neighbours
/// without a state (round 1, no initial state) are not counted.
struct StateCounts {
  std::vector<int> counts;

  int total() const { return std::accumulate(counts.begin(), counts.end(), 0); }
  bool available() const { return total() > 0; }

  std::vector<double> fractions() const {
    std::vector<double> f(counts.size(), 0.0);
    const int t = total();
    if (t == 0) return f;
    for (std::size_t i = 0; i < counts.size(); ++i) f[i] = static_cast<double>(counts[i]) / t;
    return f;
  }

  bool operator==(const StateCounts&) const = default;
};

inline StateCounts neighbor_summary(const SocialGraph& g, std::span<const Option> hard_states, std::size_t agent,
                                    std::size_t option_count) {
  if (hard_states.size() != g.n) throw InvariantError("hard state vector length differs from graph size");
  if (agent >= g.n) throw InvariantError("agent index out of range");
  StateCounts c{std::vector<int>(option_count, 0)};
  for (std::int32_t nb : g.row(agent)) {
    const Option s = hard_states[static_cast<std::size_t>(nb)];
    if (s == kNoState) continue;
    if (s < 0 || static_cast<std::size_t>(s) >= option_count) throw InvariantError("state outside option range");
    ++c.counts[static_cast<std::size_t>(s)];
  }
  return c;
}

inline void save_graph(const SocialGraph& g, const std::string& bin_path, const std::string& json_path) {
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + bin_path + "'");
  out.write(reinterpret_cast<const char*>(g.neighbors.data()),
            static_cast<std::streamsize>(g.neighbors.size() * sizeof(std::int32_t)));
  nlohmann::json side{{"n", g.n}, {"k_g", g.k}, {"p", g.p_rewire}, {"seed", g.seed}, {"checksum", hex64(g.checksum())}};
  std::ofstream js(json_path);
  js << side.dump(2) << "\n";
}

inline SocialGraph load_graph(const std::string& bin_path, const std::string& json_path) {
  std::ifstream js(json_path);
  if (!js) throw ConfigError("cannot read '" + json_path + "'");
  const auto side = nlohmann::json::parse(js);
  SocialGraph g;
  g.n = side.at("n").get<std::size_t>();
  g.k = side.at("k_g").get<std::size_t>();
  g.p_rewire = side.at("p").get<double>();
  g.seed = side.at("seed").get<std::uint64_t>();
  g.neighbors.resize(g.n * g.k);
  std::ifstream in(bin_path, std::ios::binary);
  in.read(reinterpret_cast<char*>(g.neighbors.data()), static_cast<std::streamsize>(g.neighbors.size() * sizeof(std::int32_t)));
  if (!in) throw ConfigError("graph store '" + bin_path + "' truncated");
  if (hex64(g.checksum()) != side.at("checksum").get<std::string>())
    throw ConfigError("graph checksum mismatch for '" + bin_path + "'");
  return g;
}

}  // namespace aps
