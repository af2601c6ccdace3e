#include "batchrx/cohort.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace batchrx::cohort {

namespace {

constexpr std::array<std::string_view, kFeatureCount> kFeatureNames = {
    "gender",      "age",        "ethnicity",  "elixhauser", "heart_rate", "map",          "temperature",
    "resp_rate",   "spo2",       "gcs",        "wbc",        "neutrophils", "lymphocytes", "platelets",
    "hemoglobin",  "alt",        "ast",        "bilirubin",  "bun",        "creatinine",   "albumin",
    "glucose",     "potassium",  "sodium",     "calcium",    "chloride",   "ph",           "pao2",
    "paco2",       "bicarbonate", "pf_ratio",  "lactate",    "pt",         "aptt",         "sofa",
    "urine",       "prev_fluid", "prev_vaso1", "prev_vaso2", "prev_vaso3", "prev_hydrocort",
};

constexpr std::array<std::string_view, kActionCount> kActionNames = {
    "act_liquid", "act_vaso1", "act_vaso2", "act_vaso3", "act_hydrocort",
};

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_number(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool is_missing_token(std::string_view s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null";
}

struct RawRow {
  std::size_t line;
  std::string patient;
  int t;
  Observation obs;
  DoseAction action;
  bool done;
  bool survived;
};

}  // namespace

std::span<const std::string_view> feature_names() { return kFeatureNames; }
std::span<const std::string_view> action_names() { return kActionNames; }

std::size_t Cohort::total_steps() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.steps.size();
  return n;
}

// ---- rewards --------------------------------------------------------------

double compute_reward(const Observation& now, const Observation& next, const RewardConstants& k) {
  return k.c0 * now[kSofa] + k.c1 * (next[kSofa] - now[kSofa]) + k.c2 * std::tanh(next[kLactate] - now[kLactate]);
}

double terminal_reward(bool survived, const RewardConstants& k) { return survived ? k.terminal : -k.terminal; }

void label_rewards(Episode& episode, const RewardConstants& k) {
  auto& steps = episode.steps;
  for (std::size_t t = 0; t + 1 < steps.size(); ++t) steps[t].reward = compute_reward(steps[t].obs, steps[t + 1].obs, k);
  if (!steps.empty()) steps.back().reward = terminal_reward(episode.survived, k);
}

// ---- CSV ------------------------------------------------------------------

std::vector<std::string> csv_columns() {
  std::vector<std::string> cols = {"patient_id", "t"};
  for (auto n : kFeatureNames) cols.emplace_back(n);
  for (auto n : kActionNames) cols.emplace_back(n);
  cols.emplace_back("done");
  cols.emplace_back("survived");
  return cols;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, ptr);
}

LoadResult parse_cohort(std::istream& in, const DoseCaps& caps, const RewardConstants& k, EpisodeMode mode) {
  LoadResult result;
  const auto cap_values = caps.to_array();
  std::size_t over_cap = 0;
  auto error = [&](std::size_t line, std::string column, std::string message) {
    result.errors.push_back({line, std::move(column), std::move(message)});
  };

  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (!have_header && std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) have_header = true;
  }
  if (!have_header) {
    result.warnings.push_back("empty cohort file");
    return result;
  }

  const auto expected = csv_columns();
  const auto header = split(line);
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) {
    std::string name(header[i]);
    if (i == 0 && name.size() >= 3 && name.compare(0, 3, "\xEF\xBB\xBF") == 0) name.erase(0, 3);
    if (std::find(expected.begin(), expected.end(), name) == expected.end()) {
      error(line_no, name, "unknown column");
    } else if (!index.emplace(name, i).second) {
      error(line_no, name, "duplicate column");
    }
  }
  for (const auto& name : expected) {
    if (!index.contains(name)) error(line_no, name, "missing column");
  }
  if (!result.errors.empty()) return result;

  const std::size_t header_line = line_no;
  std::vector<RawRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      error(line_no, "", "expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()));
      continue;
    }
    const std::size_t before = result.errors.size();
    auto cell = [&](std::string_view name) { return cells[index.at(std::string(name))]; };
    auto number = [&](std::string_view name, double& out) {
      if (!parse_number(cell(name), out)) {
        error(line_no, std::string(name), "not a number: '" + std::string(cell(name)) + "'");
        return false;
      }
      return true;
    };
    auto flag = [&](std::string_view name, bool& out) {
      double v = 0.0;
      if (!number(name, v)) return;
      if (v != 0.0 && v != 1.0) {
        error(line_no, std::string(name), "must be 0 or 1");
        return;
      }
      out = v == 1.0;
    };

    RawRow row{};
    row.line = line_no;
    row.patient = std::string(cell("patient_id"));
    if (row.patient.empty()) error(line_no, "patient_id", "empty patient id");
    double t = 0.0;
    if (number("t", t)) {
      if (t != std::floor(t) || t < 0.0 || t >= static_cast<double>(kMaxSteps)) {
        error(line_no, "t", "timestep must be an integer in [0, " + std::to_string(kMaxSteps - 1) + "]");
      } else {
        row.t = static_cast<int>(t);
      }
    }
    for (std::size_t f = 0; f < kFeatureCount; ++f) {
      const auto raw = cell(kFeatureNames[f]);
      if (is_missing_token(raw)) {
        row.obs[f] = kMissing;
      } else {
        number(kFeatureNames[f], row.obs[f]);
      }
    }
    if (!std::isnan(row.obs[kSofa]) && (row.obs[kSofa] < 0.0 || row.obs[kSofa] > 24.0)) {
      error(line_no, "sofa", "SOFA outside [0, 24]");
    }
    if (!std::isnan(row.obs[kGcs]) && (row.obs[kGcs] < 3.0 || row.obs[kGcs] > 15.0)) {
      error(line_no, "gcs", "GCS outside [3, 15]");
    }
    std::array<double, kActionCount> dose{};
    for (std::size_t a = 0; a < kContinuousActions; ++a) {
      if (!number(kActionNames[a], dose[a])) continue;
      if (dose[a] < 0.0) error(line_no, std::string(kActionNames[a]), "negative dose");
      if (dose[a] > cap_values[a]) ++over_cap;
    }
    bool hydro = false;
    flag("act_hydrocort", hydro);
    dose[4] = hydro ? 1.0 : 0.0;
    row.action = DoseAction::from_array(dose);
    flag("done", row.done);
    flag("survived", row.survived);
    if (result.errors.size() == before) rows.push_back(std::move(row));
  }

  if (over_cap > 0) {
    result.warnings.push_back(std::to_string(over_cap) + " dose cells exceed their cap and will be clamped when normalized");
  }
  if (rows.empty() && result.errors.empty()) {
    result.warnings.push_back("cohort file has a header (line " + std::to_string(header_line) + ") but no rows");
    return result;
  }

  // Group by patient in order of first appearance.
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const RawRow*>> groups;
  for (const auto& r : rows) {
    auto [it, inserted] = groups.try_emplace(r.patient);
    if (inserted) order.push_back(r.patient);
    it->second.push_back(&r);
  }

  Cohort cohort;
  for (const auto& id : order) {
    const auto& g = groups[id];
    if (g.size() > kMaxSteps) {
      error(g[kMaxSteps]->line, "t", "patient '" + id + "' has more than " + std::to_string(kMaxSteps) + " steps");
      continue;
    }
    bool bad = false;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (i > 0 && g[i]->t <= g[i - 1]->t) {
        error(g[i]->line, "t", "non-monotone timesteps for patient '" + id + "'");
        bad = true;
      } else if (g[i]->t != static_cast<int>(i)) {
        error(g[i]->line, "t", "timestep gap for patient '" + id + "' (expected " + std::to_string(i) + ")");
        bad = true;
      }
      if (g[i]->survived != g[0]->survived) {
        error(g[i]->line, "survived", "survival flag changes within patient '" + id + "'");
        bad = true;
      }
      const bool last = i + 1 == g.size();
      const bool done_ok = last ? (g[i]->done || mode == EpisodeMode::prefix) : !g[i]->done;
      if (!done_ok) {
        error(g[i]->line, "done", last ? "last step of an episode must have done=1" : "done=1 before the last step");
        bad = true;
      }
    }
    if (bad) continue;
    Episode ep;
    ep.patient_id = id;
    ep.survived = g[0]->survived;
    for (const auto* r : g) {
      Step s;
      s.obs = r->obs;
      s.action = r->action;
      ep.steps.push_back(s);
    }
    cohort.episodes.push_back(std::move(ep));
  }
  if (!result.errors.empty()) return result;

  // Forward fill within episodes, then cohort medians.
  for (auto& ep : cohort.episodes) {
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      for (std::size_t f = 0; f < kFeatureCount; ++f) {
        if (!std::isnan(ep.steps[t].obs[f])) continue;
        ep.steps[t].imputed.set(f);
        if (t > 0 && !std::isnan(ep.steps[t - 1].obs[f])) ep.steps[t].obs[f] = ep.steps[t - 1].obs[f];
      }
    }
  }
  std::array<double, kFeatureCount> median{};
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    std::vector<double> seen;
    for (const auto& ep : cohort.episodes) {
      for (const auto& s : ep.steps) {
        if (!s.imputed.test(f)) seen.push_back(s.obs[f]);
      }
    }
    if (seen.empty()) {
      median[f] = 0.0;
      bool any_missing = false;
      for (const auto& ep : cohort.episodes) {
        for (const auto& s : ep.steps) any_missing = any_missing || s.imputed.test(f);
      }
      if (any_missing) result.warnings.push_back("feature '" + std::string(kFeatureNames[f]) + "' never observed; filled with 0");
      continue;
    }
    const auto mid = seen.begin() + static_cast<std::ptrdiff_t>(seen.size() / 2);
    std::nth_element(seen.begin(), mid, seen.end());
    double m = *mid;
    if (seen.size() % 2 == 0) m = 0.5 * (m + *std::max_element(seen.begin(), mid));
    median[f] = m;
  }
  for (auto& ep : cohort.episodes) {
    for (auto& s : ep.steps) {
      result.imputed_cells += s.imputed.count();
      for (std::size_t f = 0; f < kFeatureCount; ++f) {
        if (std::isnan(s.obs[f])) s.obs[f] = median[f];
      }
    }
    label_rewards(ep, k);
  }
  result.cohort = std::move(cohort);
  return result;
}

LoadResult load_cohort(const std::filesystem::path& path, const DoseCaps& caps, const RewardConstants& k,
                       EpisodeMode mode) {
  std::ifstream in(path);
  if (!in) {
    LoadResult r;
    r.errors.push_back({0, "", "cannot open '" + path.string() + "'"});
    return r;
  }
  return parse_cohort(in, caps, k, mode);
}

void write_cohort(std::ostream& out, const Cohort& cohort) {
  const auto cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& ep : cohort.episodes) {
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& s = ep.steps[t];
      out << ep.patient_id << ',' << t;
      for (double v : s.obs) out << ',' << format_double(v);
      for (double v : s.action.to_array()) out << ',' << format_double(v);
      out << ',' << (t + 1 == ep.steps.size() ? 1 : 0) << ',' << (ep.survived ? 1 : 0) << '\n';
    }
  }
}

void write_cohort(const std::filesystem::path& path, const Cohort& cohort) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  write_cohort(out, cohort);
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// ---- normalization --------------------------------------------------------

Normalizer Normalizer::fit(const Cohort& train, const DoseCaps& caps) {
  if (train.total_steps() == 0) throw std::invalid_argument("fit_normalizer: empty training cohort");
  for (double c : caps.to_array()) {
    if (!(c > 0.0)) throw std::invalid_argument("fit_normalizer: dose caps must be positive");
  }
  Normalizer n;
  n.caps_ = caps;
  const double count = static_cast<double>(train.total_steps());
  for (std::size_t f = 0; f < kFeatureCount; ++f) {
    double sum = 0.0;
    for (const auto& ep : train.episodes) {
      for (const auto& s : ep.steps) sum += s.obs[f];
    }
    const double mean = sum / count;
    double ss = 0.0;
    for (const auto& ep : train.episodes) {
      for (const auto& s : ep.steps) ss += (s.obs[f] - mean) * (s.obs[f] - mean);
    }
    const double sd = std::sqrt(ss / count);
    n.mean_[f] = mean;
    n.std_[f] = sd > 1e-12 ? sd : 1.0;
  }
  n.fitted_ = true;
  return n;
}

void Normalizer::require_fitted() const {
  if (!fitted_) throw std::logic_error("normalizer used before fit");
}

Observation Normalizer::normalize(const Observation& obs) const {
  require_fitted();
  Observation z;
  for (std::size_t f = 0; f < kFeatureCount; ++f) z[f] = (obs[f] - mean_[f]) / std_[f];
  return z;
}

Observation Normalizer::denormalize(const Observation& z) const {
  require_fitted();
  Observation obs;
  for (std::size_t f = 0; f < kFeatureCount; ++f) obs[f] = z[f] * std_[f] + mean_[f];
  return obs;
}

NormalizedAction Normalizer::normalize(const DoseAction& action) const {
  require_fitted();
  const auto dose = action.to_array();
  const auto cap = caps_.to_array();
  NormalizedAction z;
  for (std::size_t a = 0; a < kContinuousActions; ++a) {
    const double x = std::clamp(dose[a], 0.0, cap[a]);
    z[a] = 2.0 * std::log1p(x) / std::log1p(cap[a]) - 1.0;
  }
  z[4] = dose[4] >= 0.5 ? 1.0 : -1.0;
  return z;
}

DoseAction Normalizer::denormalize(std::span<const double, kActionCount> z) const {
  require_fitted();
  const auto cap = caps_.to_array();
  std::array<double, kActionCount> dose{};
  for (std::size_t a = 0; a < kContinuousActions; ++a) {
    dose[a] = std::clamp(std::expm1((z[a] + 1.0) * 0.5 * std::log1p(cap[a])), 0.0, cap[a]);
  }
  dose[4] = z[4] >= 0.0 ? 1.0 : 0.0;
  return DoseAction::from_array(dose);
}

nlohmann::json Normalizer::to_json() const {
  require_fitted();
  return {{"mean", mean_},
          {"std", std_},
          {"caps", {{"liquid", caps_.liquid}, {"vaso1", caps_.vaso1}, {"vaso2", caps_.vaso2}, {"vaso3", caps_.vaso3}}}};
}

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer n;
  n.mean_ = j.at("mean").get<std::array<double, kFeatureCount>>();
  n.std_ = j.at("std").get<std::array<double, kFeatureCount>>();
  const auto& c = j.at("caps");
  n.caps_ = {c.at("liquid").get<double>(), c.at("vaso1").get<double>(), c.at("vaso2").get<double>(),
             c.at("vaso3").get<double>()};
  n.fitted_ = true;
  return n;
}

}  // namespace batchrx::cohort
