#include "batchrx/buffer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace batchrx {

using cohort::Cohort;
using cohort::NormalizedAction;
using cohort::Normalizer;

HistoryPair make_history_pair(const cohort::Observation& normalized_obs, const NormalizedAction& previous_action) {
  HistoryPair p;
  std::copy(normalized_obs.begin(), normalized_obs.end(), p.begin());
  std::copy(previous_action.begin(), previous_action.end(), p.begin() + cohort::kFeatureCount);
  return p;
}

NormalizedAction no_op_action(const Normalizer& normalizer) { return normalizer.normalize(cohort::DoseAction{}); }

std::vector<HistoryPair> history_pairs(std::span<const cohort::Observation> observations,
                                       std::span<const cohort::DoseAction> actions, const Normalizer& normalizer) {
  if (actions.size() + 1 != observations.size() && actions.size() != observations.size()) {
    throw std::invalid_argument("history_pairs: observation/action counts do not line up");
  }
  std::vector<HistoryPair> pairs;
  pairs.reserve(observations.size());
  NormalizedAction prev = no_op_action(normalizer);
  for (std::size_t k = 0; k < observations.size(); ++k) {
    pairs.push_back(make_history_pair(normalizer.normalize(observations[k]), prev));
    if (k < actions.size()) prev = normalizer.normalize(actions[k]);
  }
  return pairs;
}

RecordsBuffer::RecordsBuffer(const Cohort& cohort, const Normalizer& normalizer) {
  const NormalizedAction noop = no_op_action(normalizer);
  for (const auto& ep : cohort.episodes) {
    if (ep.steps.empty()) continue;
    Normalized n;
    NormalizedAction prev = noop;
    for (const auto& s : ep.steps) {
      n.obs.push_back(normalizer.normalize(s.obs));
      n.pairs.push_back(make_history_pair(n.obs.back(), prev));
      prev = normalizer.normalize(s.action);
      n.actions.push_back(prev);
      n.rewards.push_back(s.reward);
    }
    const std::size_t e = episodes_.size();
    for (std::size_t t = 0; t < ep.steps.size(); ++t) index_.emplace_back(e, t);
    episodes_.push_back(std::move(n));
  }
}

TransitionSample RecordsBuffer::transition(std::size_t flat) const {
  const auto [e, t] = index_.at(flat);
  const Normalized& ep = episodes_[e];
  const std::size_t len = ep.pairs.size();
  TransitionSample s;
  s.episode = e;
  s.t = t;
  s.prefix_length = t + 1;
  s.sequence.assign(ep.pairs.begin(), ep.pairs.begin() + static_cast<std::ptrdiff_t>(t + 1));
  s.done = t + 1 == len;
  s.sequence.push_back(s.done ? make_history_pair(ep.obs[t], ep.actions[t]) : ep.pairs[t + 1]);
  s.action = ep.actions[t];
  s.reward = ep.rewards[t];
  return s;
}

std::vector<TransitionSample> RecordsBuffer::sample_minibatch(std::size_t n, Rng& rng) const {
  if (index_.empty()) throw std::invalid_argument("sample_minibatch: empty buffer");
  if (n == 0) throw std::invalid_argument("sample_minibatch: N must be at least 1");
  std::uniform_int_distribution<std::size_t> pick(0, index_.size() - 1);
  std::vector<TransitionSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(transition(pick(rng)));
  return out;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

CohortSplit split_by_patient(const Cohort& all, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw std::invalid_argument("split: fraction outside [0,1]");
  const auto idx = shuffled_indices(all.episodes.size(), seed);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
  std::vector<bool> in_train(idx.size(), false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[idx[i]] = true;
  CohortSplit split;
  for (std::size_t i = 0; i < all.episodes.size(); ++i) {
    (in_train[i] ? split.train : split.test).episodes.push_back(all.episodes[i]);
  }
  return split;
}

std::vector<CohortSplit> kfold_by_patient(const Cohort& all, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("kfold: need at least 2 folds");
  const auto idx = shuffled_indices(all.episodes.size(), seed);
  std::vector<std::size_t> fold_of(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) fold_of[idx[k]] = k % folds;
  std::vector<CohortSplit> out(folds);
  for (std::size_t f = 0; f < folds; ++f) {
    for (std::size_t i = 0; i < all.episodes.size(); ++i) {
      (fold_of[i] == f ? out[f].test : out[f].train).episodes.push_back(all.episodes[i]);
    }
  }
  return out;
}

}  // namespace batchrx
