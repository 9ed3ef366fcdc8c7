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

// Shadow-audit sampling, the design-weighted residual-corrected estimator,
// simplex projection, per-stratum diagnostics and residual-risk scores.

#include <map>

#include "aps/common.hpp"
#include "aps/metrics.hpp"

namespace aps {

/// Which sampling branch a stratum drew in one round.
enum class AuditBranch { kNone, kStateStratified, kUniform };

/// One round's audit design. `frame` and `psi` are aligned; `audited` is the
/// realised set U_t. Inclusion probabilities are exact for the mixture of the
/// state-stratified and uniform branches.
struct AuditDesign {
  std::vector<std::size_t> frame;
  std::vector<double> psi;
  std::vector<int> frame_stratum;
  std::vector<std::size_t> allocation;  // a_m per stratum
  std::vector<AuditBranch> branch;      // per stratum
  std::vector<std::size_t> audited;     // ascending
  double epsilon = 0.1;

  double inclusion(std::size_t agent) const {
    auto it = std::lower_bound(frame.begin(), frame.end(), agent);
    if (it == frame.end() || *it != agent) return 0.0;
    return psi[static_cast<std::size_t>(it - frame.begin())];
  }
};

struct AuditSamplingConfig {
  double epsilon = 0.1;          // uniform exploration mass
  double rare_cell = 0.05;       // predicted-state cells below this frame share get >= 1 draw
};

/// Deterministic split of a stratum's audit count over predicted-state cells.
/// Rare cells (share < rare_cell) get one draw first, smallest cells first;
/// the rest is proportional to cell size with largest-remainder rounding.
inline std::vector<std::size_t> cell_allocation(std::span<const std::size_t> cell_sizes, std::size_t count,
                                                double rare_cell) {
  const std::size_t k = cell_sizes.size();
  std::size_t frame = 0;
  for (auto s : cell_sizes) frame += s;
  count = std::min(count, frame);
  std::vector<std::size_t> out(k, 0);
  std::vector<std::size_t> rare;
  for (std::size_t c = 0; c < k; ++c)
    if (cell_sizes[c] > 0 && static_cast<double>(cell_sizes[c]) < rare_cell * static_cast<double>(frame)) rare.push_back(c);
  std::stable_sort(rare.begin(), rare.end(), [&](std::size_t a, std::size_t b) { return cell_sizes[a] < cell_sizes[b]; });
  std::size_t used = 0;
  for (std::size_t c : rare) {
    if (used == count) break;
    out[c] = 1;
    ++used;
  }
  std::vector<double> w(k);
  std::vector<std::size_t> caps(k);
  for (std::size_t c = 0; c < k; ++c) {
    w[c] = static_cast<double>(cell_sizes[c]);
    caps[c] = cell_sizes[c] - out[c];
  }
  const auto rest = largest_remainder(w, count - used, caps);
  for (std::size_t c = 0; c < k; ++c) out[c] += rest[c];
  return out;
}

/// Splits the audit budget across strata in proportion to frame size. Each
/// non-empty frame gets one audit first when the budget allows, so every
/// frame member keeps a positive inclusion probability.
inline std::vector<std::size_t> audit_stratum_allocation(std::span<const std::size_t> frame_sizes, std::size_t budget) {
  const std::size_t k = frame_sizes.size();
  std::vector<std::size_t> out(k, 0);
  std::size_t nonempty = 0, total = 0;
  for (auto s : frame_sizes) {
    nonempty += s > 0;
    total += s;
  }
  budget = std::min(budget, total);
  std::size_t used = 0;
  if (budget >= nonempty) {
    for (std::size_t m = 0; m < k; ++m)
      if (frame_sizes[m] > 0) {
        out[m] = 1;
        ++used;
      }
  }
  std::vector<double> w(k);
  std::vector<std::size_t> caps(k);
  for (std::size_t m = 0; m < k; ++m) {
    w[m] = static_cast<double>(frame_sizes[m]);
    caps[m] = frame_sizes[m] - out[m];
  }
  const auto rest = largest_remainder(w, budget - used, caps);
  for (std::size_t m = 0; m < k; ++m) out[m] += rest[m];
  return out;
}

/// Draws the audit set U_t. `frames[m]` lists the correction-frame agents of
/// stratum m (ascending); `predicted` is indexed by agent id. Per stratum,
/// one coin decides the branch: uniform with probability epsilon, otherwise
/// state-stratified over predicted-state cells.
inline AuditDesign sample_audit_set(const std::vector<std::vector<std::size_t>>& frames, std::size_t budget,
                                    std::span<const Option> predicted, std::size_t option_count,
                                    const AuditSamplingConfig& cfg, std::uint64_t seed, std::size_t round) {
  if (!(cfg.epsilon > 0.0 && cfg.epsilon <= 1.0)) throw DesignError("audit epsilon must lie in (0,1]");
  AuditDesign d;
  d.epsilon = cfg.epsilon;
  std::vector<std::size_t> sizes;
  for (const auto& f : frames) sizes.push_back(f.size());
  d.allocation = audit_stratum_allocation(sizes, budget);
  d.branch.assign(frames.size(), AuditBranch::kNone);
  std::vector<std::pair<std::size_t, std::pair<double, int>>> rows;
  for (std::size_t m = 0; m < frames.size(); ++m) {
    const auto& frame = frames[m];
    if (frame.empty()) continue;
    const std::size_t a = d.allocation[m];
    const double uniform_p = static_cast<double>(a) / static_cast<double>(frame.size());
    // Cells by predicted state.
    std::vector<std::vector<std::size_t>> cells(option_count);
    for (std::size_t i : frame) {
      const Option s = predicted[i];
      if (s < 0 || static_cast<std::size_t>(s) >= option_count) throw InvariantError("frame agent lacks a predicted state");
      cells[static_cast<std::size_t>(s)].push_back(i);
    }
    std::vector<std::size_t> cell_sizes;
    for (const auto& c : cells) cell_sizes.push_back(c.size());
    const auto per_cell = cell_allocation(cell_sizes, a, cfg.rare_cell);
    for (std::size_t i : frame) {
      const auto c = static_cast<std::size_t>(predicted[i]);
      const double cell_p = static_cast<double>(per_cell[c]) / static_cast<double>(cells[c].size());
      const double psi = std::min(1.0, (1.0 - cfg.epsilon) * cell_p + cfg.epsilon * uniform_p);
      rows.push_back({i, {psi, static_cast<int>(m)}});
    }
    if (a == 0) continue;
    Rng rng = keyed_rng(seed, {stream::kAudit, round, m});
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < cfg.epsilon) {
      d.branch[m] = AuditBranch::kUniform;
      auto pick = sample_without_replacement(frame, a, rng);
      d.audited.insert(d.audited.end(), pick.begin(), pick.end());
    } else {
      d.branch[m] = AuditBranch::kStateStratified;
      for (std::size_t c = 0; c < option_count; ++c) {
        if (per_cell[c] == 0) continue;
        auto pick = sample_without_replacement(cells[c], per_cell[c], rng);
        d.audited.insert(d.audited.end(), pick.begin(), pick.end());
      }
    }
  }
  std::sort(rows.begin(), rows.end());
  for (const auto& [agent, v] : rows) {
    d.frame.push_back(agent);
    d.psi.push_back(v.first);
    d.frame_stratum.push_back(v.second);
  }
  std::sort(d.audited.begin(), d.audited.end());
  return d;
}

/// Unprojected design-weighted residual-corrected estimate:
///   (1/N) sum_i h_i + (1/N) sum_{i in U} (onehot(label_i) - h_i) / psi_i.
/// `soft` is N x K. Entries sum to one; they may be negative.
inline Distribution audit_correct(const Matrix& soft, std::span<const std::size_t> audited,
                                  std::span<const Option> labels, std::span<const double> psi) {
  if (audited.size() != labels.size() || audited.size() != psi.size())
    throw InvariantError("audit_correct: audited, labels and psi must align");
  const std::size_t n = soft.rows, k = soft.cols;
  Distribution est(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = soft.row(i);
    for (std::size_t y = 0; y < k; ++y) est[y] += h[y];
  }
  for (std::size_t q = 0; q < audited.size(); ++q) {
    if (!(psi[q] > 0.0)) throw DesignError("audited agent " + std::to_string(audited[q]) + " has non-positive inclusion probability");
    const auto h = soft.row(audited[q]);
    for (std::size_t y = 0; y < k; ++y) {
      const double z = labels[q] == static_cast<Option>(y) ? 1.0 : 0.0;
      est[y] += (z - h[y]) / psi[q];
    }
  }
  for (double& v : est) v /= static_cast<double>(n);
  return est;
}

/// Clips negative entries and renormalises; an all-zero result falls back to
/// the uniform distribution.
inline Distribution project_simplex(std::span<const double> v) {
  Distribution p(v.begin(), v.end());
  double s = 0.0;
  for (double& x : p) {
    if (!std::isfinite(x)) throw InvariantError("project_simplex: non-finite entry");
    x = std::max(0.0, x);
    s += x;
  }
  if (s <= 0.0) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(p.size()));
    return p;
  }
  for (double& x : p) x /= s;
  return p;
}

// Diagnostics ----------------------------------------------------------------

/// What the diagnostics need to know about one audited agent.
struct AuditObservation {
  std::size_t agent = 0;
  Option predicted = kNoState;
  Option shadow = kNoState;
  Distribution soft;
  std::vector<double> support_distances;
  std::vector<Option> support_options;
};

struct StratumDiagnostics {
  std::size_t audits = 0;
  double mismatch = 0.0;            // e
  double residual_variance = 0.0;   // V^res
  double monitoring_jsd = 0.0;
  double support_distance = 0.0;    // rho
  double disagreement_slope = 0.0;  // L
  double rare_recall = 1.0;         // r
};

inline StratumDiagnostics compute_diagnostics(std::span<const AuditObservation> obs, std::size_t option_count,
                                              double rare_threshold = 0.05) {
  StratumDiagnostics d;
  d.audits = obs.size();
  if (obs.empty()) return d;
  const double a = static_cast<double>(obs.size());

  std::size_t miss = 0;
  std::vector<double> pred_hist(option_count, 0.0), shadow_hist(option_count, 0.0);
  for (const auto& o : obs) {
    miss += o.predicted != o.shadow;
    pred_hist[static_cast<std::size_t>(o.predicted)] += 1.0 / a;
    shadow_hist[static_cast<std::size_t>(o.shadow)] += 1.0 / a;
  }
  d.mismatch = static_cast<double>(miss) / a;
  d.monitoring_jsd = jsd(pred_hist, shadow_hist);

  // Sum over options of the sample variance (n - 1) of the residuals.
  if (obs.size() >= 2) {
    for (std::size_t y = 0; y < option_count; ++y) {
      double mean = 0.0;
      for (const auto& o : obs) mean += ((o.shadow == static_cast<Option>(y) ? 1.0 : 0.0) - o.soft[y]) / a;
      double ss = 0.0;
      for (const auto& o : obs) {
        const double r = (o.shadow == static_cast<Option>(y) ? 1.0 : 0.0) - o.soft[y];
        ss += (r - mean) * (r - mean);
      }
      d.residual_variance += ss / (a - 1.0);
    }
  }

  double rho = 0.0, entropy = 0.0;
  for (const auto& o : obs) {
    if (!o.support_distances.empty())
      rho += std::accumulate(o.support_distances.begin(), o.support_distances.end(), 0.0) /
             static_cast<double>(o.support_distances.size());
    if (!o.support_options.empty()) {
      std::vector<double> h(option_count, 0.0);
      for (Option s : o.support_options) h[static_cast<std::size_t>(s)] += 1.0 / static_cast<double>(o.support_options.size());
      entropy += shannon_entropy_bits(h);
    }
  }
  d.support_distance = rho / a;
  d.disagreement_slope = (entropy / a) / (d.support_distance + 1e-6);

  std::size_t rare = 0, recovered = 0;
  for (const auto& o : obs) {
    if (shadow_hist[static_cast<std::size_t>(o.shadow)] < rare_threshold) {
      ++rare;
      recovered += o.predicted == o.shadow;
    }
  }
  d.rare_recall = rare == 0 ? 1.0 : static_cast<double>(recovered) / static_cast<double>(rare);
  return d;
}

struct RiskWeights {
  double lambda_rho = 1.0;
  double lambda_e = 1.0;
  double lambda_r = 1.0;
};

/// Divides V^res, L, rho and e by their maxima over strata that were audited
/// this round (a zero maximum leaves zeros). Recall is already in [0,1].
inline std::vector<StratumDiagnostics> normalize_diagnostics(std::vector<StratumDiagnostics> diags) {
  double mv = 0.0, ml = 0.0, mr = 0.0, me = 0.0;
  for (const auto& d : diags) {
    if (d.audits == 0) continue;
    mv = std::max(mv, d.residual_variance);
    ml = std::max(ml, d.disagreement_slope);
    mr = std::max(mr, d.support_distance);
    me = std::max(me, d.mismatch);
  }
  auto scale = [](double v, double m) { return m > 0.0 ? v / m : 0.0; };
  for (auto& d : diags) {
    d.residual_variance = scale(d.residual_variance, mv);
    d.disagreement_slope = scale(d.disagreement_slope, ml);
    d.support_distance = scale(d.support_distance, mr);
    d.mismatch = scale(d.mismatch, me);
  }
  return diags;
}

/// R = V + l_rho L^2 rho^2 + l_e e^2 + l_r (1 - r)^2 on normalised diagnostics.
inline double risk_score(const StratumDiagnostics& d, const RiskWeights& w = {}) {
  if (w.lambda_rho < 0 || w.lambda_e < 0 || w.lambda_r < 0) throw ConfigError("risk weights must be >= 0");
  const double lr = d.disagreement_slope * d.support_distance;
  return d.residual_variance + w.lambda_rho * lr * lr + w.lambda_e * d.mismatch * d.mismatch +
         w.lambda_r * (1.0 - d.rare_recall) * (1.0 - d.rare_recall);
}

}  // namespace aps
