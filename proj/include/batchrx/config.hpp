#pragma once

// Run configuration: one JSON document with a `version` field. Every field
// has a default; unknown keys are rejected at every level.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "batchrx/agent.hpp"
#include "batchrx/sim.hpp"

namespace batchrx::config {

inline constexpr int kConfigVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvaluationSettings {
  std::size_t bins = 20;
  std::size_t min_bin_count = 10;
  /// Zero-dose threshold for the safe rate, as a fraction of each dose cap.
  double zero_epsilon_fraction = 0.02;
  /// Cross-validation folds for the calibration envelope; 0 disables.
  std::size_t folds = 5;
  std::size_t difference_bins = 11;
  /// Candidate count and perturbation bound used when recommending; the
  /// agent's training values are used when these are absent (negative).
  long long n_candidates = -1;
  double max_perturbation = -1.0;
  /// Simulator oracle comparisons (policy value and extrapolation error).
  bool simulator_oracle = true;
  std::size_t rollouts = 500;
  std::size_t extrapolation_states = 100;
  std::size_t extrapolation_rollouts = 50;

  nlohmann::json to_json() const;
  static EvaluationSettings from_json(const nlohmann::json& j);
};

struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  /// Cohort CSVs; empty means <output_dir>/train.csv and <output_dir>/test.csv.
  std::filesystem::path train_cohort;
  std::filesystem::path test_cohort;
  std::size_t train_patients = 2000;
  std::size_t test_patients = 500;
  sim::SimParams sim;
  agent::Hyperparameters agent;
  EvaluationSettings evaluation;

  std::filesystem::path train_path() const { return train_cohort.empty() ? output_dir / "train.csv" : train_cohort; }
  std::filesystem::path test_path() const { return test_cohort.empty() ? output_dir / "test.csv" : test_cohort; }

  nlohmann::json to_json() const;
  /// Throws ConfigError on unknown keys, wrong types or invalid values.
  static RunConfig from_json(const nlohmann::json& j);
};

/// Parses JSON text; syntax errors are reported as "line L, column C: ...".
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace batchrx::config
