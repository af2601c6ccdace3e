#pragma once

// Patient trajectory data model: feature/action schema, cohort CSV I/O,
// reward labeling and normalization.

#include <array>
#include <bitset>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace batchrx::cohort {

inline constexpr std::size_t kFeatureCount = 41;
inline constexpr std::size_t kActionCount = 5;
inline constexpr std::size_t kContinuousActions = 4;
inline constexpr std::size_t kMaxSteps = 12;

// Column order of the observation vector.
enum Feature : std::size_t {
  kGender, kAge, kEthnicity, kElixhauser,
  kHeartRate, kMap, kTemperature, kRespRate, kSpo2, kGcs,
  kWbc, kNeutrophils, kLymphocytes, kPlatelets, kHemoglobin, kAlt, kAst, kBilirubin, kBun, kCreatinine,
  kAlbumin, kGlucose, kPotassium, kSodium, kCalcium, kChloride, kPh, kPao2, kPaco2, kBicarbonate,
  kPfRatio, kLactate, kPt, kAptt,
  kSofa, kUrine,
  kPrevFluid, kPrevVaso1, kPrevVaso2, kPrevVaso3, kPrevHydrocortisone,
};

std::span<const std::string_view> feature_names();
std::span<const std::string_view> action_names();

using Observation = std::array<double, kFeatureCount>;
using NormalizedAction = std::array<double, kActionCount>;

/// Doses in clinical units: liquid mL/2h, vaso1 ug/kg/min (norepinephrine,
/// phenylephrine), vaso2 U/min (vasopressin, angiotensin II), vaso3 ug/kg/min
/// (epinephrine, dopamine, dobutamine), hydrocortisone 0/1.
struct DoseAction {
  double liquid = 0.0;
  double vaso1 = 0.0;
  double vaso2 = 0.0;
  double vaso3 = 0.0;
  double hydrocortisone = 0.0;

  std::array<double, kActionCount> to_array() const { return {liquid, vaso1, vaso2, vaso3, hydrocortisone}; }
  static DoseAction from_array(std::span<const double, kActionCount> v) { return {v[0], v[1], v[2], v[3], v[4]}; }
  friend bool operator==(const DoseAction&, const DoseAction&) = default;
};

struct DoseCaps {
  double liquid = 2000.0;
  double vaso1 = 2.0;
  double vaso2 = 0.2;
  double vaso3 = 2.0;

  std::array<double, kContinuousActions> to_array() const { return {liquid, vaso1, vaso2, vaso3}; }
  friend bool operator==(const DoseCaps&, const DoseCaps&) = default;
};

struct Step {
  Observation obs{};
  DoseAction action;
  double reward = 0.0;
  std::bitset<kFeatureCount> imputed;
};

struct Episode {
  std::string patient_id;
  std::vector<Step> steps;
  bool survived = false;

  std::size_t length() const { return steps.size(); }
};

struct Cohort {
  std::vector<Episode> episodes;

  std::size_t total_steps() const;
  bool empty() const { return episodes.empty(); }
};

// ---- rewards --------------------------------------------------------------

struct RewardConstants {
  double c0 = -0.1;
  double c1 = -1.0;
  double c2 = -2.0;
  double terminal = 25.0;
};

/// c0 * SOFA_t + c1 * (SOFA_{t+1} - SOFA_t) + c2 * tanh(lactate_{t+1} - lactate_t)
double compute_reward(const Observation& now, const Observation& next, const RewardConstants& k = {});
double terminal_reward(bool survived, const RewardConstants& k = {});
/// Intermediate steps from adjacent observations, last step from survival.
void label_rewards(Episode& episode, const RewardConstants& k = {});

// ---- CSV ------------------------------------------------------------------

struct Diagnostic {
  std::size_t line = 0;  // 1-based file line, 0 for whole-file problems
  std::string column;
  std::string message;
};

struct LoadResult {
  Cohort cohort;
  std::vector<Diagnostic> errors;
  std::vector<std::string> warnings;
  std::size_t imputed_cells = 0;

  bool ok() const { return errors.empty(); }
};

std::vector<std::string> csv_columns();

/// `prefix` accepts histories that stop before the episode ends: the last row
/// may carry done=0 (done=1 is still rejected anywhere earlier).
enum class EpisodeMode { complete, prefix };

/// Parses, validates, imputes (forward fill within an episode, then cohort
/// median) and labels rewards. On any error the returned cohort is empty.
LoadResult parse_cohort(std::istream& in, const DoseCaps& caps = {}, const RewardConstants& k = {},
                        EpisodeMode mode = EpisodeMode::complete);
LoadResult load_cohort(const std::filesystem::path& path, const DoseCaps& caps = {}, const RewardConstants& k = {},
                       EpisodeMode mode = EpisodeMode::complete);

void write_cohort(std::ostream& out, const Cohort& cohort);
void write_cohort(const std::filesystem::path& path, const Cohort& cohort);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// ---- normalization --------------------------------------------------------

class Normalizer {
 public:
  Normalizer() = default;

  static Normalizer fit(const Cohort& train, const DoseCaps& caps = {});

  bool fitted() const { return fitted_; }
  const DoseCaps& caps() const { return caps_; }
  std::span<const double> means() const { return mean_; }
  std::span<const double> stds() const { return std_; }

  Observation normalize(const Observation& obs) const;
  /// Continuous doses: x -> 2 log1p(x) / log1p(cap) - 1; hydrocortisone {0,1} -> {-1,+1}.
  NormalizedAction normalize(const DoseAction& action) const;
  Observation denormalize(const Observation& z) const;
  /// Inverse dose map clamped to [0, cap]; hydrocortisone is 1 iff z >= 0.
  DoseAction denormalize(std::span<const double, kActionCount> z) const;

  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);

 private:
  void require_fitted() const;

  bool fitted_ = false;
  DoseCaps caps_;
  std::array<double, kFeatureCount> mean_{};
  std::array<double, kFeatureCount> std_{};
};

}  // namespace batchrx::cohort
