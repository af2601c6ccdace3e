#include "batchrx/config.hpp"

#include <fstream>
#include <sstream>

namespace batchrx::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

json EvaluationSettings::to_json() const {
  return {{"bins", bins},
          {"min_bin_count", min_bin_count},
          {"zero_epsilon_fraction", zero_epsilon_fraction},
          {"folds", folds},
          {"difference_bins", difference_bins},
          {"n_candidates", n_candidates},
          {"max_perturbation", max_perturbation},
          {"simulator_oracle", simulator_oracle},
          {"rollouts", rollouts},
          {"extrapolation_states", extrapolation_states},
          {"extrapolation_rollouts", extrapolation_rollouts}};
}

EvaluationSettings EvaluationSettings::from_json(const json& j) {
  EvaluationSettings e;
  const std::string where = "evaluation";
  reject_unknown(j, e.to_json(), where);
  read(j, "bins", e.bins, where);
  read(j, "min_bin_count", e.min_bin_count, where);
  read(j, "zero_epsilon_fraction", e.zero_epsilon_fraction, where);
  read(j, "folds", e.folds, where);
  read(j, "difference_bins", e.difference_bins, where);
  read(j, "n_candidates", e.n_candidates, where);
  read(j, "max_perturbation", e.max_perturbation, where);
  read(j, "simulator_oracle", e.simulator_oracle, where);
  read(j, "rollouts", e.rollouts, where);
  read(j, "extrapolation_states", e.extrapolation_states, where);
  read(j, "extrapolation_rollouts", e.extrapolation_rollouts, where);
  if (e.bins < 1) throw ConfigError("evaluation.bins must be >= 1");
  if (e.folds == 1) throw ConfigError("evaluation.folds must be 0 or >= 2");
  if (e.difference_bins % 2 == 0) throw ConfigError("evaluation.difference_bins must be odd");
  if (!(e.zero_epsilon_fraction > 0.0)) throw ConfigError("evaluation.zero_epsilon_fraction must be positive");
  if (e.n_candidates == 0) throw ConfigError("evaluation.n_candidates must be >= 1 (or negative for the agent's)");
  if (e.rollouts < 1 || e.extrapolation_rollouts < 1) throw ConfigError("evaluation rollouts must be >= 1");
  return e;
}

json RunConfig::to_json() const {
  return {{"version", version},
          {"seed", seed},
          {"output_dir", output_dir.string()},
          {"cohort", {{"train", train_cohort.string()}, {"test", test_cohort.string()}}},
          {"simulation", {{"train_patients", train_patients}, {"test_patients", test_patients}, {"params", sim.to_json()}}},
          {"agent", agent.to_json()},
          {"evaluation", evaluation.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, c.to_json(), "config");
  if (!j.contains("version")) throw ConfigError("config: missing required key 'version'");
  read(j, "version", c.version, "config");
  if (c.version != kConfigVersion) {
    throw ConfigError("config: unsupported version " + std::to_string(c.version) + " (expected " +
                      std::to_string(kConfigVersion) + ")");
  }
  read(j, "seed", c.seed, "config");
  std::string out = c.output_dir.string();
  read(j, "output_dir", out, "config");
  c.output_dir = out;
  if (j.contains("cohort")) {
    const auto& co = j.at("cohort");
    reject_unknown(co, c.to_json().at("cohort"), "cohort");
    std::string train, test;
    read(co, "train", train, "cohort");
    read(co, "test", test, "cohort");
    c.train_cohort = train;
    c.test_cohort = test;
  }
  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    reject_unknown(s, c.to_json().at("simulation"), "simulation");
    read(s, "train_patients", c.train_patients, "simulation");
    read(s, "test_patients", c.test_patients, "simulation");
    if (s.contains("params")) {
      try {
        c.sim = sim::SimParams::from_json(s.at("params"));
      } catch (const std::exception& e) {
        throw ConfigError(std::string("simulation.params: ") + e.what());
      }
    }
    if (c.train_patients < 1 || c.test_patients < 1) throw ConfigError("simulation: patient counts must be >= 1");
  }
  if (j.contains("agent")) {
    try {
      c.agent = agent::Hyperparameters::from_json(j.at("agent"));
      c.agent.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("agent: ") + e.what());
    }
  }
  // The run seed also seeds training unless the agent block pins its own.
  if (!j.contains("agent") || !j.at("agent").contains("seed")) c.agent.seed = c.seed;
  if (j.contains("evaluation")) c.evaluation = EvaluationSettings::from_json(j.at("evaluation"));
  return c;
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line and column.
    std::size_t line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw ConfigError("invalid JSON at line " + std::to_string(line) + ", column " + std::to_string(column) + ": " +
                      e.what());
  }
  return RunConfig::from_json(j);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::system_error(errno, std::generic_category(), "cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace batchrx::config
