#pragma once

// Synthetic sepsis cohort generator with known ground-truth dynamics.
//
// Each patient carries a hidden (severity, tone, fluid balance) state. Tone
// sets the mean arterial pressure; severity drives SOFA, lactate and the
// final mortality risk. Vasopressors and fluids raise tone through saturating
// responses, hypoperfusion (negative tone) and large third-class vasopressor
// doses add severity, and hydrocortisone slowly lowers it. A noisy heuristic
// "clinician" produces the logged actions.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "batchrx/cohort.hpp"
#include "batchrx/rng.hpp"

namespace batchrx::sim {

using cohort::DoseAction;
using cohort::Observation;

struct SimParams {
  // Initial state distribution.
  double initial_severity_mean = 2.0;
  double initial_severity_sd = 0.8;
  double initial_tone_mean = -0.6;
  double initial_tone_sd = 0.5;
  double initial_fluid_sd = 0.3;

  // Severity: s' = decay * s + drift + hypoperfusion * max(0, -tone')
  //              + overload * max(0, fluid' - threshold) + stress * (vaso3 / scale3)^2
  //              - hydrocortisone_gain * hc + noise
  double severity_decay = 0.9;
  double severity_drift = 0.15;
  double hypoperfusion_gain = 0.3;
  double fluid_overload_gain = 0.2;
  double fluid_overload_threshold = 3.0;
  double vaso3_stress_gain = 0.25;
  double hydrocortisone_gain = 0.08;

  // Tone: tone' = decay * tone + coupling * s + sum_k gain_k * tanh(dose_k / scale_k) + noise
  double tone_decay = 0.6;
  double tone_severity_coupling = -0.15;
  double fluid_tone_gain = 0.3;
  double fluid_scale = 500.0;
  double vaso1_gain = 1.2;
  double vaso1_scale = 0.3;
  double vaso2_gain = 0.5;
  double vaso2_scale = 0.04;
  double vaso3_gain = 0.4;
  double vaso3_scale = 0.3;

  // Fluid balance in litres: f' = decay * f + liquid / 1000 + noise
  double fluid_decay = 0.85;

  double severity_noise = 0.15;
  double tone_noise = 0.15;
  double fluid_noise = 0.05;
  /// Multiplies every observation noise term and the spread of demographics.
  double observation_noise = 1.0;

  // P(death) = logistic(intercept + slope * final severity)
  double mortality_intercept = -4.0;
  double mortality_slope = 1.0;

  // Clinician heuristic.
  double behavior_map_target = 70.0;
  double behavior_fluid_base = 100.0;
  double behavior_fluid_per_mmhg = 30.0;
  double behavior_vaso1_threshold = 65.0;
  double behavior_vaso1_per_mmhg = 0.012;
  double behavior_vaso2_trigger = 0.15;
  double behavior_vaso2_dose = 0.03;
  double behavior_vaso3_probability = 0.15;
  double behavior_vaso3_dose = 0.3;
  double behavior_hydrocortisone_sofa = 10.0;
  double behavior_hydrocortisone_probability = 0.5;
  /// Sigma of the multiplicative log-normal dose noise.
  double behavior_dose_noise = 0.3;

  std::size_t episode_length = cohort::kMaxSteps;
  cohort::DoseCaps caps;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep defaults; unknown keys are rejected.
  static SimParams from_json(const nlohmann::json& j);
  /// Copy with every stochastic term (state, observation and behavior noise,
  /// initial spreads) set to zero.
  SimParams noiseless() const;
};

struct LatentState {
  double severity = 0.0;
  double tone = 0.0;
  double fluid = 0.0;
};

/// Per-patient constants emitted in the demographic columns.
struct PatientTraits {
  double gender = 0.0;
  double age = 65.0;
  double ethnicity = 0.0;
  double elixhauser = 3.0;
};

/// Everything observed about a patient so far: observations o_0..o_t and the
/// actions a_0..a_{t-1} (or a_t once the step has been taken).
struct PatientHistory {
  std::vector<Observation> observations;
  std::vector<DoseAction> actions;
};

/// Full simulator state of one patient; the latent part is never exposed to
/// policies.
struct SimPatient {
  PatientTraits traits;
  LatentState latent;
  PatientHistory history;

  /// Index of the next decision (number of actions already taken).
  std::size_t t() const { return history.actions.size(); }
};

class Policy {
 public:
  virtual ~Policy() = default;
  /// One action per history; histories[i] has one more observation than actions.
  virtual std::vector<DoseAction> act(std::span<const PatientHistory> histories, Rng& rng) const = 0;
};

class SimWorld;

class BehaviorPolicy final : public Policy {
 public:
  explicit BehaviorPolicy(const SimWorld& world) : world_(world) {}
  std::vector<DoseAction> act(std::span<const PatientHistory> histories, Rng& rng) const override;

 private:
  const SimWorld& world_;
};

class ConstantPolicy final : public Policy {
 public:
  explicit ConstantPolicy(DoseAction action) : action_(action) {}
  std::vector<DoseAction> act(std::span<const PatientHistory> histories, Rng&) const override {
    return std::vector<DoseAction>(histories.size(), action_);
  }

 private:
  DoseAction action_;
};

class SimWorld {
 public:
  explicit SimWorld(SimParams params);

  const SimParams& params() const { return p_; }

  PatientTraits sample_traits(Rng& rng) const;
  LatentState sample_initial(Rng& rng) const;
  /// Deterministic part of the transition plus the supplied standard-normal
  /// draws (pass zeros for the noiseless map).
  LatentState step(const LatentState& s, const DoseAction& a, double z_severity = 0.0, double z_tone = 0.0,
                   double z_fluid = 0.0) const;
  LatentState transition(const LatentState& s, const DoseAction& a, Rng& rng) const;
  Observation observe(const LatentState& s, const PatientTraits& traits, const DoseAction& previous, Rng& rng) const;
  double survival_probability(double final_severity) const;
  /// Clinician dose for the latest observation, given earlier actions.
  DoseAction behavior(const PatientHistory& history, Rng& rng) const;

  /// A freshly admitted patient with its first observation.
  SimPatient admit(Rng& rng) const;

  /// Patients are generated independently from derive_seed(seed, index);
  /// ids are "P<offset + index>".
  cohort::Cohort generate_cohort(std::size_t n_patients, std::uint64_t seed, std::size_t id_offset = 0) const;
  /// Same as generate_cohort but also returns each patient's admission state,
  /// for oracle evaluation of logged histories.
  struct Generated {
    cohort::Cohort cohort;
    std::vector<std::vector<SimPatient>> prefixes;  // prefixes[i][t]: patient i just before decision t
    std::vector<LatentState> final_states;          // latent state after the last transition
  };
  Generated generate_with_states(std::size_t n_patients, std::uint64_t seed, std::size_t id_offset = 0) const;

 private:
  SimParams p_;
};

struct Estimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t rollouts = 0;
  std::vector<double> returns;
};

/// Continues every patient in `starts` to the end of its episode under
/// `policy` (optionally forcing each patient's first action) and returns the
/// discounted return of each. Patient i draws world noise from
/// Rng(world_seeds[i]); the policy is queried for all patients at once with
/// `policy_rng`, so rollouts that share world seeds are paired across policies.
std::vector<double> rollout_returns(const SimWorld& world, const Policy& policy, std::vector<SimPatient> starts,
                                    std::span<const std::uint64_t> world_seeds, double gamma, Rng& policy_rng,
                                    std::span<const DoseAction> first_actions = {});

/// Monte-Carlo estimate of the remaining discounted return from `prefix`.
/// Rollout r uses world stream derive_seed(seed, r). A prefix whose episode
/// is complete returns 0.
Estimate monte_carlo_q(const SimWorld& world, const Policy& policy, const SimPatient& prefix, std::size_t rollouts,
                       double gamma, std::uint64_t seed, const std::optional<DoseAction>& first_action = std::nullopt);

/// Value of the policy from freshly admitted patients: rollout r admits a new
/// patient from world stream derive_seed(seed, r).
Estimate policy_value(const SimWorld& world, const Policy& policy, std::size_t rollouts, double gamma,
                      std::uint64_t seed);

using CriticFn = std::function<double(const PatientHistory& history, const DoseAction& action)>;

struct ExtrapolationReport {
  double mean_abs_error = 0.0;
  std::vector<double> true_q;
  std::vector<double> critic_q;
  std::vector<double> abs_error;
  nlohmann::json to_json() const;
};

/// Mean |Q_true(s, pi(s)) - Q_critic(s, pi(s))| over `states`, where Q_true is
/// monte_carlo_q with the first action forced to pi's choice.
ExtrapolationReport extrapolation_error(const SimWorld& world, const Policy& policy, const CriticFn& critic,
                                        std::span<const SimPatient> states, std::size_t rollouts, double gamma,
                                        std::uint64_t seed);

}  // namespace batchrx::sim
