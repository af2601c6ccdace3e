#pragma once

// Evaluation reports over a recommendation table: Q-vs-survival calibration,
// safe rate, dose-difference mortality and per-timestep dose distributions.
// The report functions are pure; the agent only enters through
// recommend_for_cohort and AgentPolicy.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "batchrx/agent.hpp"
#include "batchrx/cohort.hpp"
#include "batchrx/sim.hpp"

namespace batchrx::eval {

using cohort::DoseAction;

/// One logged decision with the policy's recommendation for the same history.
struct Decision {
  std::size_t episode = 0;
  std::size_t t = 0;
  DoseAction clinician;
  DoseAction recommended;
  double q_clinician = 0.0;  // critic value of the logged action
  double q_recommended = 0.0;
  bool survived = false;
};

struct RecommendationTable {
  std::vector<Decision> decisions;  // grouped by episode, time-ordered
  std::size_t episode_count = 0;
};

/// The clinician's own actions as recommendations (Q values zero).
RecommendationTable replay_recommendations(const cohort::Cohort& cohort);

struct SelectionSettings {
  std::size_t n_candidates = 10;
  double max_perturbation = 0.05;
  agent::LatentMode latent_mode = agent::LatentMode::sample;
  std::uint64_t seed = 0;
};

/// Encodes every logged history once and selects an action for each
/// (episode, t) from the history the clinician saw at that step.
RecommendationTable recommend_for_cohort(const agent::Agent& agent, const cohort::Normalizer& normalizer,
                                         const cohort::Cohort& cohort, const SelectionSettings& settings);

/// Simulator policy backed by a trained agent.
class AgentPolicy final : public sim::Policy {
 public:
  AgentPolicy(const agent::Agent& agent, const cohort::Normalizer& normalizer, SelectionSettings settings)
      : agent_(agent), normalizer_(normalizer), settings_(settings) {}
  std::vector<DoseAction> act(std::span<const sim::PatientHistory> histories, Rng& rng) const override;

 private:
  const agent::Agent& agent_;
  const cohort::Normalizer& normalizer_;
  SelectionSettings settings_;
};

/// Q_theta1 of (encoded history, normalized action).
sim::CriticFn agent_critic(const agent::Agent& agent, const cohort::Normalizer& normalizer);

// ---- rank correlation -----------------------------------------------------

/// Spearman correlation with average ranks for ties; nullopt when either
/// ranking has zero variance or fewer than two points.
std::optional<double> spearman(std::span<const double> xs, std::span<const double> ys);

// ---- calibration ----------------------------------------------------------

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::size_t survivors = 0;
  double survival_rate() const { return count > 0 ? static_cast<double>(survivors) / static_cast<double>(count) : 0.0; }
  double midpoint() const { return 0.5 * (lo + hi); }
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  std::optional<double> spearman;  // over bins with count >= min_count
  std::size_t min_count = 10;
  nlohmann::json to_json() const;
};

/// Equal-width bins over [min q, max q] (last bin closed), or over the given
/// edges when non-empty (values outside fall into the end bins).
CalibrationReport q_survival_calibration(std::span<const double> q, const std::vector<bool>& survived,
                                         std::size_t bin_count = 20, std::size_t min_count = 10,
                                         std::span<const double> edges = {});
CalibrationReport q_survival_calibration(const RecommendationTable& table, std::size_t bin_count = 20,
                                         std::size_t min_count = 10);

std::vector<double> equal_width_edges(double lo, double hi, std::size_t bins);

struct CalibrationEnvelope {
  std::vector<double> edges;
  std::vector<std::optional<double>> lower;  // min survival rate across folds, populated bins only
  std::vector<std::optional<double>> upper;
  std::vector<std::optional<double>> fold_spearman;
  nlohmann::json to_json() const;
};

/// Recomputes every fold's calibration on a shared grid spanning all folds'
/// Q values and takes the per-bin min/max survival rate.
CalibrationEnvelope calibration_envelope(std::span<const std::vector<double>> fold_q,
                                         std::span<const std::vector<bool>> fold_survived, std::size_t bin_count = 20,
                                         std::size_t min_count = 10);

// ---- safe rate ------------------------------------------------------------

struct SafeRateSettings {
  /// Absolute "zero dose" thresholds for liquid, vaso1, vaso2, vaso3.
  std::array<double, cohort::kContinuousActions> zero_epsilon{40.0, 0.04, 0.004, 0.04};
  double lower_ratio = 0.7;
  double upper_ratio = 1.3;

  static SafeRateSettings from_caps(const cohort::DoseCaps& caps, double fraction = 0.02);
};

struct SafeRateReport {
  double overall = 0.0;
  std::array<double, cohort::kActionCount> marginal{};
  std::size_t patients = 0;
  std::vector<std::size_t> steps_per_patient;
  nlohmann::json to_json() const;
};

/// Whether component j of a recommendation is within the band of the
/// clinician's dose (see SafeRateSettings for the zero-dose rule).
bool component_safe(std::size_t j, double recommended, double clinician, const SafeRateSettings& s);
SafeRateReport safe_rate(const RecommendationTable& table, const SafeRateSettings& settings);

// ---- dose difference vs mortality -----------------------------------------

struct DoseDiffBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::size_t deaths = 0;
  double mortality() const { return count > 0 ? static_cast<double>(deaths) / static_cast<double>(count) : 0.0; }
};

/// Bins (recommended - clinician) for continuous component j (0..3) in
/// clinical units. Values beyond the outer edges land in the end bins.
std::vector<DoseDiffBin> dose_difference_mortality(const RecommendationTable& table, std::size_t component,
                                                   std::span<const double> edges);
/// Zero-centred edges: `bins` (odd) bins of width cap / 10 with the middle
/// bin straddling zero.
std::vector<double> default_difference_edges(double cap, std::size_t bins = 11);

// ---- dose distribution ----------------------------------------------------

struct DoseDistributionRow {
  std::size_t t = 0;
  std::size_t component = 0;
  std::size_t patients = 0;
  double clinician_mean = 0.0;
  double recommended_mean = 0.0;
  double clinician_nonzero = 0.0;
  double recommended_nonzero = 0.0;
};

/// 12 x 5 rows (t-major). A dose counts as nonzero when it reaches the
/// component's zero threshold (hydrocortisone: equals 1).
std::vector<DoseDistributionRow> dose_distribution(const RecommendationTable& table, const SafeRateSettings& settings);

}  // namespace batchrx::eval
