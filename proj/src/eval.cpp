#include "batchrx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace batchrx::eval {

using ad::Tensor;

namespace {

constexpr std::size_t kSelectionChunk = 1024;

Tensor stack_rows(std::span<const Tensor> blocks, std::size_t cols) {
  std::size_t rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  Tensor out({rows, cols});
  std::size_t r = 0;
  for (const auto& b : blocks) {
    std::copy(b.values().begin(), b.values().end(), out.data() + r * cols);
    r += b.rows();
  }
  return out;
}

Tensor row_range(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out({end - begin, t.cols()});
  std::copy(t.data() + begin * t.cols(), t.data() + end * t.cols(), out.data());
  return out;
}

}  // namespace

RecommendationTable replay_recommendations(const cohort::Cohort& cohort) {
  RecommendationTable table;
  table.episode_count = cohort.episodes.size();
  for (std::size_t e = 0; e < cohort.episodes.size(); ++e) {
    const auto& ep = cohort.episodes[e];
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      table.decisions.push_back({e, t, ep.steps[t].action, ep.steps[t].action, 0.0, 0.0, ep.survived});
    }
  }
  return table;
}

RecommendationTable recommend_for_cohort(const agent::Agent& agent, const cohort::Normalizer& normalizer,
                                         const cohort::Cohort& cohort, const SelectionSettings& settings) {
  RecommendationTable table;
  table.episode_count = cohort.episodes.size();
  std::vector<std::vector<HistoryPair>> sequences;
  std::vector<Decision> decisions;
  std::vector<cohort::NormalizedAction> logged;
  for (std::size_t e = 0; e < cohort.episodes.size(); ++e) {
    const auto& ep = cohort.episodes[e];
    if (ep.steps.empty()) continue;
    std::vector<cohort::Observation> obs;
    std::vector<DoseAction> actions;
    for (const auto& s : ep.steps) {
      decisions.push_back({e, obs.size(), s.action, {}, 0.0, 0.0, ep.survived});
      obs.push_back(s.obs);
      actions.push_back(s.action);
      logged.push_back(normalizer.normalize(s.action));
    }
    sequences.push_back(history_pairs(obs, actions, normalizer));
  }
  if (decisions.empty()) return table;
  const auto embedded = agent.encode_all_steps(sequences);
  const Tensor states = stack_rows(embedded, agent.state_dim());
  Tensor logged_actions({logged.size(), agent::kActionDim});
  for (std::size_t i = 0; i < logged.size(); ++i) {
    std::copy(logged[i].begin(), logged[i].end(), logged_actions.data() + i * agent::kActionDim);
  }
  Rng rng(settings.seed);
  for (std::size_t begin = 0; begin < decisions.size(); begin += kSelectionChunk) {
    const std::size_t end = std::min(decisions.size(), begin + kSelectionChunk);
    const Tensor s = row_range(states, begin, end);
    const auto q_logged = agent.q_values(s, row_range(logged_actions, begin, end));
    const auto sel = agent.select_action(s, settings.n_candidates, settings.max_perturbation, rng, settings.latent_mode);
    for (std::size_t i = begin; i < end; ++i) {
      Decision& d = decisions[i];
      d.q_clinician = q_logged[i - begin];
      d.q_recommended = sel.q[i - begin];
      d.recommended = normalizer.denormalize(std::span<const double, agent::kActionDim>(
          sel.actions.data() + (i - begin) * agent::kActionDim, agent::kActionDim));
    }
  }
  table.decisions = std::move(decisions);
  return table;
}

std::vector<DoseAction> AgentPolicy::act(std::span<const sim::PatientHistory> histories, Rng& rng) const {
  std::vector<DoseAction> out;
  if (histories.empty()) return out;
  std::vector<std::vector<HistoryPair>> pairs;
  pairs.reserve(histories.size());
  for (const auto& h : histories) pairs.push_back(history_pairs(h.observations, h.actions, normalizer_));
  const Tensor states = agent_.encode(pairs);
  const auto sel = agent_.select_action(states, settings_.n_candidates, settings_.max_perturbation, rng,
                                        settings_.latent_mode);
  out.reserve(histories.size());
  for (std::size_t i = 0; i < histories.size(); ++i) {
    out.push_back(normalizer_.denormalize(
        std::span<const double, agent::kActionDim>(sel.actions.data() + i * agent::kActionDim, agent::kActionDim)));
  }
  return out;
}

sim::CriticFn agent_critic(const agent::Agent& agent, const cohort::Normalizer& normalizer) {
  return [&agent, &normalizer](const sim::PatientHistory& history, const DoseAction& action) {
    const std::vector<std::vector<HistoryPair>> pairs{history_pairs(history.observations, history.actions, normalizer)};
    const auto a = normalizer.normalize(action);
    return agent.q_values(agent.encode(pairs), Tensor({1, agent::kActionDim}, std::vector<double>(a.begin(), a.end())))
        .front();
  };
}

// ---- rank correlation -----------------------------------------------------

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
  if (xs.size() < 2) return std::nullopt;
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

// ---- calibration ----------------------------------------------------------

std::vector<double> equal_width_edges(double lo, double hi, std::size_t bins) {
  if (bins < 1) throw std::invalid_argument("calibration: need at least one bin");
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  }
  edges.back() = hi;
  return edges;
}

namespace {

std::size_t bin_index(std::span<const double> edges, double v) {
  const std::size_t bins = edges.size() - 1;
  const auto it = std::upper_bound(edges.begin(), edges.end(), v);
  const auto pos = static_cast<std::size_t>(it - edges.begin());
  if (pos == 0) return 0;
  return std::min(pos - 1, bins - 1);
}

}  // namespace

CalibrationReport q_survival_calibration(std::span<const double> q, const std::vector<bool>& survived,
                                         std::size_t bin_count, std::size_t min_count, std::span<const double> edges) {
  if (q.size() != survived.size()) throw std::invalid_argument("calibration: q and survival lengths differ");
  CalibrationReport rep;
  rep.min_count = min_count;
  if (q.empty()) return rep;
  std::vector<double> own;
  if (edges.empty()) {
    const auto [lo, hi] = std::minmax_element(q.begin(), q.end());
    own = equal_width_edges(*lo, *hi, bin_count);
    edges = own;
  }
  if (edges.size() < 2) throw std::invalid_argument("calibration: need at least two edges");
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) rep.bins.push_back({edges[b], edges[b + 1], 0, 0});
  for (std::size_t i = 0; i < q.size(); ++i) {
    auto& bin = rep.bins[bin_index(edges, q[i])];
    ++bin.count;
    if (survived[i]) ++bin.survivors;
  }
  std::vector<double> mids, rates;
  for (const auto& b : rep.bins) {
    if (b.count >= min_count) {
      mids.push_back(b.midpoint());
      rates.push_back(b.survival_rate());
    }
  }
  rep.spearman = spearman(mids, rates);
  return rep;
}

CalibrationReport q_survival_calibration(const RecommendationTable& table, std::size_t bin_count,
                                         std::size_t min_count) {
  std::vector<double> q;
  std::vector<bool> survived;
  for (const auto& d : table.decisions) {
    q.push_back(d.q_clinician);
    survived.push_back(d.survived);
  }
  return q_survival_calibration(q, survived, bin_count, min_count);
}

nlohmann::json CalibrationReport::to_json() const {
  nlohmann::json bins_json = nlohmann::json::array();
  for (const auto& b : bins) {
    bins_json.push_back(
        {{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"survivors", b.survivors}, {"survival_rate", b.survival_rate()}});
  }
  return {{"bins", bins_json},
          {"min_count", min_count},
          {"spearman", spearman ? nlohmann::json(*spearman) : nlohmann::json(nullptr)}};
}

CalibrationEnvelope calibration_envelope(std::span<const std::vector<double>> fold_q,
                                         std::span<const std::vector<bool>> fold_survived, std::size_t bin_count,
                                         std::size_t min_count) {
  if (fold_q.size() != fold_survived.size() || fold_q.empty()) {
    throw std::invalid_argument("calibration_envelope: need matching, non-empty fold lists");
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& q : fold_q) {
    for (double v : q) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  CalibrationEnvelope env;
  if (!std::isfinite(lo)) return env;
  env.edges = equal_width_edges(lo, hi, bin_count);
  env.lower.assign(bin_count, std::nullopt);
  env.upper.assign(bin_count, std::nullopt);
  for (std::size_t f = 0; f < fold_q.size(); ++f) {
    // Each fold's correlation uses its own equal-width grid, like a single run.
    const auto own = q_survival_calibration(fold_q[f], fold_survived[f], bin_count, min_count);
    env.fold_spearman.push_back(own.spearman);
    const auto shared = q_survival_calibration(fold_q[f], fold_survived[f], bin_count, min_count, env.edges);
    for (std::size_t b = 0; b < bin_count; ++b) {
      if (shared.bins[b].count < min_count) continue;
      const double r = shared.bins[b].survival_rate();
      env.lower[b] = env.lower[b] ? std::min(*env.lower[b], r) : r;
      env.upper[b] = env.upper[b] ? std::max(*env.upper[b], r) : r;
    }
  }
  return env;
}

nlohmann::json CalibrationEnvelope::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json lo = nlohmann::json::array(), hi = nlohmann::json::array(), rho = nlohmann::json::array();
  for (const auto& v : lower) lo.push_back(opt(v));
  for (const auto& v : upper) hi.push_back(opt(v));
  for (const auto& v : fold_spearman) rho.push_back(opt(v));
  return {{"edges", edges}, {"lower", lo}, {"upper", hi}, {"fold_spearman", rho}};
}

// ---- safe rate ------------------------------------------------------------

SafeRateSettings SafeRateSettings::from_caps(const cohort::DoseCaps& caps, double fraction) {
  SafeRateSettings s;
  const auto c = caps.to_array();
  for (std::size_t j = 0; j < c.size(); ++j) s.zero_epsilon[j] = fraction * c[j];
  return s;
}

bool component_safe(std::size_t j, double recommended, double clinician, const SafeRateSettings& s) {
  if (j == cohort::kContinuousActions) return (recommended >= 0.5) == (clinician >= 0.5);
  if (clinician == 0.0) return recommended < s.zero_epsilon[j];
  const double ratio = recommended / clinician;
  return ratio > s.lower_ratio && ratio < s.upper_ratio;
}

SafeRateReport safe_rate(const RecommendationTable& table, const SafeRateSettings& settings) {
  if (table.decisions.empty()) throw std::invalid_argument("safe_rate: empty cohort");
  struct Tally {
    std::size_t steps = 0;
    std::size_t all_safe = 0;
    std::array<std::size_t, cohort::kActionCount> safe{};
  };
  std::vector<Tally> per_episode(table.episode_count);
  for (const auto& d : table.decisions) {
    if (d.episode >= per_episode.size()) per_episode.resize(d.episode + 1);
    Tally& tally = per_episode[d.episode];
    const auto rec = d.recommended.to_array();
    const auto real = d.clinician.to_array();
    bool all = true;
    for (std::size_t j = 0; j < cohort::kActionCount; ++j) {
      const bool ok = component_safe(j, rec[j], real[j], settings);
      tally.safe[j] += ok ? 1 : 0;
      all = all && ok;
    }
    ++tally.steps;
    tally.all_safe += all ? 1 : 0;
  }
  SafeRateReport rep;
  for (const auto& tally : per_episode) {
    if (tally.steps == 0) continue;
    const double steps = static_cast<double>(tally.steps);
    ++rep.patients;
    rep.steps_per_patient.push_back(tally.steps);
    rep.overall += static_cast<double>(tally.all_safe) / steps;
    for (std::size_t j = 0; j < cohort::kActionCount; ++j) rep.marginal[j] += static_cast<double>(tally.safe[j]) / steps;
  }
  const double n = static_cast<double>(rep.patients);
  rep.overall /= n;
  for (double& m : rep.marginal) m /= n;
  return rep;
}

nlohmann::json SafeRateReport::to_json() const {
  nlohmann::json marg;
  const auto names = cohort::action_names();
  for (std::size_t j = 0; j < marginal.size(); ++j) marg[std::string(names[j])] = marginal[j];
  return {{"overall", overall}, {"marginal", marg}, {"patients", patients}, {"steps_per_patient", steps_per_patient}};
}

// ---- dose difference vs mortality -----------------------------------------

std::vector<double> default_difference_edges(double cap, std::size_t bins) {
  if (bins % 2 == 0 || bins < 1) throw std::invalid_argument("difference edges: bin count must be odd");
  const double w = cap / 10.0;
  const double half = static_cast<double>(bins) / 2.0;
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = (static_cast<double>(i) - half) * w;
  return edges;
}

std::vector<DoseDiffBin> dose_difference_mortality(const RecommendationTable& table, std::size_t component,
                                                   std::span<const double> edges) {
  if (component >= cohort::kContinuousActions) throw std::invalid_argument("dose difference: component must be 0..3");
  if (edges.size() < 2) throw std::invalid_argument("dose difference: need at least two edges");
  std::vector<DoseDiffBin> bins;
  for (std::size_t b = 0; b + 1 < edges.size(); ++b) bins.push_back({edges[b], edges[b + 1], 0, 0});
  for (const auto& d : table.decisions) {
    const double diff = d.recommended.to_array()[component] - d.clinician.to_array()[component];
    auto& bin = bins[bin_index(edges, diff)];
    ++bin.count;
    if (!d.survived) ++bin.deaths;
  }
  return bins;
}

// ---- dose distribution ----------------------------------------------------

std::vector<DoseDistributionRow> dose_distribution(const RecommendationTable& table, const SafeRateSettings& settings) {
  std::vector<DoseDistributionRow> rows;
  for (std::size_t t = 0; t < cohort::kMaxSteps; ++t) {
    for (std::size_t j = 0; j < cohort::kActionCount; ++j) rows.push_back({t, j, 0, 0.0, 0.0, 0.0, 0.0});
  }
  auto nonzero = [&](std::size_t j, double v) {
    return j == cohort::kContinuousActions ? v >= 0.5 : v >= settings.zero_epsilon[j];
  };
  for (const auto& d : table.decisions) {
    if (d.t >= cohort::kMaxSteps) continue;
    const auto real = d.clinician.to_array();
    const auto rec = d.recommended.to_array();
    for (std::size_t j = 0; j < cohort::kActionCount; ++j) {
      auto& row = rows[d.t * cohort::kActionCount + j];
      ++row.patients;
      row.clinician_mean += real[j];
      row.recommended_mean += rec[j];
      row.clinician_nonzero += nonzero(j, real[j]) ? 1.0 : 0.0;
      row.recommended_nonzero += nonzero(j, rec[j]) ? 1.0 : 0.0;
    }
  }
  for (auto& row : rows) {
    if (row.patients == 0) continue;
    const double n = static_cast<double>(row.patients);
    row.clinician_mean /= n;
    row.recommended_mean /= n;
    row.clinician_nonzero /= n;
    row.recommended_nonzero /= n;
  }
  return rows;
}

}  // namespace batchrx::eval
