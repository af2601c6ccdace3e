#pragma once

// The records buffer: normalized episodes flattened into history-prefixed
// transitions, uniform minibatch sampling, and patient-level splits.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "batchrx/cohort.hpp"
#include "batchrx/rng.hpp"

namespace batchrx {

inline constexpr std::size_t kPairWidth = cohort::kFeatureCount + cohort::kActionCount;

/// One encoder input: a normalized observation followed by the normalized
/// action taken just before it.
using HistoryPair = std::array<double, kPairWidth>;

HistoryPair make_history_pair(const cohort::Observation& normalized_obs, const cohort::NormalizedAction& previous_action);

struct TransitionSample {
  /// Prefix ({o_0, a_-1}, ..., {o_t, a_t-1}) followed by one extension pair
  /// {o_t+1, a_t}. Terminal transitions extend with {o_t, a_t}; their
  /// successor is never bootstrapped.
  std::vector<HistoryPair> sequence;
  std::size_t prefix_length = 0;
  cohort::NormalizedAction action{};
  double reward = 0.0;
  bool done = false;
  std::size_t episode = 0;
  std::size_t t = 0;

  std::span<const HistoryPair> prefix() const { return {sequence.data(), prefix_length}; }
  std::span<const HistoryPair> extended() const { return sequence; }
};

class RecordsBuffer {
 public:
  RecordsBuffer(const cohort::Cohort& cohort, const cohort::Normalizer& normalizer);

  std::size_t size() const { return index_.size(); }
  bool empty() const { return index_.empty(); }
  std::size_t episode_count() const { return episodes_.size(); }

  /// Transition by flat index over all (episode, t) pairs.
  TransitionSample transition(std::size_t flat) const;
  /// N transitions drawn uniformly with replacement over all (episode, t).
  std::vector<TransitionSample> sample_minibatch(std::size_t n, Rng& rng) const;

 private:
  struct Normalized {
    std::vector<HistoryPair> pairs;
    std::vector<cohort::NormalizedAction> actions;
    std::vector<double> rewards;
    std::vector<cohort::Observation> obs;
  };

  std::vector<Normalized> episodes_;
  std::vector<std::pair<std::size_t, std::size_t>> index_;
};

/// Normalized "no operation" action: every dose zero, no hydrocortisone.
cohort::NormalizedAction no_op_action(const cohort::Normalizer& normalizer);

/// Pair sequence for a history of observations and the actions taken between
/// them (actions.size() == observations.size() - 1, or equal when complete).
std::vector<HistoryPair> history_pairs(std::span<const cohort::Observation> observations,
                                       std::span<const cohort::DoseAction> actions,
                                       const cohort::Normalizer& normalizer);

struct CohortSplit {
  cohort::Cohort train;
  cohort::Cohort test;
};

/// Seeded split by patient; `train_fraction` of patients (rounded) go to train.
CohortSplit split_by_patient(const cohort::Cohort& all, double train_fraction, std::uint64_t seed);
/// Seeded k-fold partition by patient; fold i tests on the i-th slice.
std::vector<CohortSplit> kfold_by_patient(const cohort::Cohort& all, std::size_t folds, std::uint64_t seed);

}  // namespace batchrx
