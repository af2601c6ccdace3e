#include "batchrx/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "batchrx/agent.hpp"
#include "batchrx/buffer.hpp"
#include "batchrx/cohort.hpp"
#include "batchrx/config.hpp"
#include "batchrx/eval.hpp"
#include "batchrx/sim.hpp"

namespace batchrx::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommandError : std::runtime_error {
  CommandError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

[[noreturn]] void fail(int code, const std::string& message) { throw CommandError(code, message); }

std::string hex(const unsigned char* bytes, unsigned n) {
  std::ostringstream ss;
  for (unsigned i = 0; i < n; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(bytes[i]);
  return ss.str();
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string finish() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    EVP_DigestFinal_ex(ctx_, md, &len);
    return hex(md, len);
  }

 private:
  EVP_MD_CTX* ctx_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(kIoError, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) fail(kIoError, "write failed for '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(kIoError, "cannot create output directory '" + dir.string() + "'");
  // Probe writability up front so failures surface before any work.
  const fs::path probe = dir / ".batchrx-write-probe";
  {
    std::ofstream p(probe);
    if (!p) fail(kIoError, "output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---- shared state of one invocation ---------------------------------------

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out_dir;
  std::string history;
  std::string policy = "agent";
};

config::RunConfig resolve_config(const Options& o) {
  config::RunConfig cfg;
  if (!o.config_path.empty()) {
    try {
      cfg = config::load_config(o.config_path);
    } catch (const config::ConfigError& e) {
      fail(kConfigError, "config '" + o.config_path + "': " + e.what());
    } catch (const std::system_error& e) {
      fail(kIoError, e.what());
    }
  }
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.agent.seed = *o.seed;
  }
  if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
  return cfg;
}

std::string config_hash(const config::RunConfig& cfg) { return sha256_string(cfg.to_json().dump()); }

void write_manifest(const config::RunConfig& cfg, const std::string& command, const fs::path& dir,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& artifacts, json extra = {}) {
  json m;
  m["command"] = command;
  m["config_hash"] = config_hash(cfg);
  m["seed"] = cfg.seed;
  json in = json::object();
  for (const auto& p : inputs) in[p.filename().string()] = sha256_file(p);
  json out = json::object();
  for (const auto& p : artifacts) out[p.filename().string()] = sha256_file(p);
  m["inputs"] = in;
  m["artifacts"] = out;
  if (!extra.is_null()) m["details"] = std::move(extra);
  write_text(dir / ("manifest-" + command + ".json"), dump(m));
}

cohort::Cohort load_valid_cohort(const fs::path& path, const cohort::DoseCaps& caps, std::ostream& err) {
  if (!fs::exists(path)) fail(kIoError, "cohort file '" + path.string() + "' does not exist");
  auto result = cohort::load_cohort(path, caps);
  for (const auto& w : result.warnings) err << "warning: " << path.string() << ": " << w << "\n";
  if (!result.ok()) {
    std::ostringstream ss;
    ss << "cohort '" << path.string() << "' failed validation with " << result.errors.size() << " error(s):";
    const std::size_t shown = std::min<std::size_t>(result.errors.size(), 20);
    for (std::size_t i = 0; i < shown; ++i) {
      const auto& d = result.errors[i];
      ss << "\n  line " << d.line << (d.column.empty() ? "" : ", column " + d.column) << ": " << d.message;
    }
    if (shown < result.errors.size()) ss << "\n  ...";
    fail(kDataError, ss.str());
  }
  return std::move(result.cohort);
}

// ---- checkpoints ----------------------------------------------------------

fs::path sidecar_path(const fs::path& bxp) {
  fs::path p = bxp;
  p.replace_extension(".json");
  return p;
}

struct LoadedAgent {
  agent::Agent agent;
  cohort::Normalizer normalizer;
};

void save_checkpoint(agent::Agent& agent, const cohort::Normalizer& normalizer, const fs::path& bxp) {
  try {
    agent.save(bxp);
  } catch (const std::exception& e) {
    fail(kIoError, e.what());
  }
  json side = {{"format", "batchrx-agent"},
               {"version", 1},
               {"hyperparameters", agent.hyper().to_json()},
               {"normalizer", normalizer.to_json()},
               {"architecture", agent.architecture()}};
  write_text(sidecar_path(bxp), dump(side));
}

LoadedAgent load_checkpoint(const fs::path& bxp) {
  const fs::path side = sidecar_path(bxp);
  if (!fs::exists(bxp)) fail(kIoError, "checkpoint '" + bxp.string() + "' does not exist");
  if (!fs::exists(side)) fail(kIoError, "checkpoint sidecar '" + side.string() + "' does not exist");
  std::ifstream in(side);
  json j;
  try {
    j = json::parse(in);
    if (j.at("format") != "batchrx-agent" || j.at("version") != 1) {
      fail(kCheckpointError, "'" + side.string() + "' is not a version 1 batchrx agent sidecar");
    }
    LoadedAgent loaded{agent::Agent(agent::Hyperparameters::from_json(j.at("hyperparameters"))),
                       cohort::Normalizer::from_json(j.at("normalizer"))};
    loaded.agent.load(bxp);
    return loaded;
  } catch (const CommandError&) {
    throw;
  } catch (const std::exception& e) {
    fail(kCheckpointError, "checkpoint '" + bxp.string() + "' does not match: " + e.what());
  }
}

eval::SelectionSettings selection_for(const config::RunConfig& cfg, const agent::Agent& agent, std::uint64_t seed) {
  eval::SelectionSettings s;
  s.n_candidates = cfg.evaluation.n_candidates > 0 ? static_cast<std::size_t>(cfg.evaluation.n_candidates)
                                                   : agent.hyper().n_candidates;
  s.max_perturbation =
      cfg.evaluation.max_perturbation >= 0.0 ? cfg.evaluation.max_perturbation : agent.hyper().max_perturbation;
  s.seed = seed;
  return s;
}

// ---- commands -------------------------------------------------------------

int cmd_simulate(const Options& o, std::ostream& out, std::ostream&) {
  const auto cfg = resolve_config(o);
  ensure_dir(cfg.output_dir);
  const sim::SimWorld world(cfg.sim);
  const auto train = world.generate_cohort(cfg.train_patients, derive_seed(cfg.seed, 1));
  const auto test = world.generate_cohort(cfg.test_patients, derive_seed(cfg.seed, 2), cfg.train_patients);
  const fs::path train_path = cfg.train_path();
  const fs::path test_path = cfg.test_path();
  for (const auto& p : {train_path, test_path}) {
    if (p.has_parent_path()) ensure_dir(p.parent_path());
  }
  try {
    cohort::write_cohort(train_path, train);
    cohort::write_cohort(test_path, test);
  } catch (const std::exception& e) {
    fail(kIoError, e.what());
  }
  json details = {{"params_hash", sha256_string(cfg.sim.to_json().dump())},
                  {"train_rows", train.total_steps()},
                  {"test_rows", test.total_steps()},
                  {"train_patients", train.episodes.size()},
                  {"test_patients", test.episodes.size()}};
  write_manifest(cfg, "simulate", cfg.output_dir, {}, {train_path, test_path}, details);
  out << "wrote " << train_path.string() << " (" << train.total_steps() << " rows) and " << test_path.string() << " ("
      << test.total_steps() << " rows)\n";
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(o);
  ensure_dir(cfg.output_dir);
  const auto train = load_valid_cohort(cfg.train_path(), cfg.sim.caps, err);
  if (train.empty()) fail(kDataError, "training cohort '" + cfg.train_path().string() + "' has no patients");
  const auto normalizer = cohort::Normalizer::fit(train, cfg.sim.caps);
  const RecordsBuffer buffer(train, normalizer);
  const std::size_t every = std::max<std::size_t>(1, cfg.agent.epochs / 10);
  agent::TrainResult result = [&] {
    try {
      return agent::train(buffer, cfg.agent, [&](std::size_t m, const agent::EpochLog& log) {
        if ((m + 1) % every == 0) {
          err << "epoch " << (m + 1) << "/" << cfg.agent.epochs << " vae " << log.vae_loss << " critic "
              << log.critic_loss << " q " << log.perturbation_objective << "\n";
        }
      });
    } catch (const agent::TrainingError& e) {
      fail(kDataError, std::string("training aborted: ") + e.what());
    }
  }();
  const fs::path bxp = o.checkpoint.empty() ? cfg.output_dir / "agent.bxp" : fs::path(o.checkpoint);
  if (bxp.has_parent_path()) ensure_dir(bxp.parent_path());
  save_checkpoint(result.agent, normalizer, bxp);
  const fs::path log_path = cfg.output_dir / "training_log.json";
  write_text(log_path, dump(result.log.to_json()));
  write_manifest(cfg, "train", cfg.output_dir, {cfg.train_path()}, {bxp, sidecar_path(bxp), log_path},
                 {{"epochs", cfg.agent.epochs}, {"transitions", buffer.size()}});
  out << "wrote " << bxp.string() << " after " << cfg.agent.epochs << " epochs\n";
  return kOk;
}

json estimate_json(const sim::Estimate& e) {
  return {{"mean", e.mean}, {"standard_error", e.standard_error}, {"rollouts", e.rollouts}};
}

json paired_difference(const sim::Estimate& a, const sim::Estimate& b) {
  const std::size_t n = std::min(a.returns.size(), b.returns.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a.returns[i] - b.returns[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.returns[i] - b.returns[i] - mean;
    ss += d * d;
  }
  const double se = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
  return {{"mean", mean}, {"standard_error", se}, {"rollouts", n}};
}

json cross_validation(const config::RunConfig& cfg, const cohort::Cohort& train, const cohort::Cohort& test,
                      const eval::SelectionSettings& selection) {
  cohort::Cohort all = train;
  all.episodes.insert(all.episodes.end(), test.episodes.begin(), test.episodes.end());
  const auto splits = kfold_by_patient(all, cfg.evaluation.folds, derive_seed(cfg.seed, 31));
  std::vector<std::vector<double>> fold_q(splits.size());
  std::vector<std::vector<bool>> fold_survived(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  auto run_fold = [&](std::size_t f) {
    try {
      const auto norm = cohort::Normalizer::fit(splits[f].train, cfg.sim.caps);
      const RecordsBuffer buffer(splits[f].train, norm);
      auto hyper = cfg.agent;
      hyper.seed = derive_seed(cfg.agent.seed, 100 + f);
      const auto trained = agent::train(buffer, hyper);
      const auto table = eval::recommend_for_cohort(trained.agent, norm, splits[f].test, selection);
      for (const auto& d : table.decisions) {
        fold_q[f].push_back(d.q_clinician);
        fold_survived[f].push_back(d.survived);
      }
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(splits.size()));
  if (workers <= 1) {
    for (std::size_t f = 0; f < splits.size(); ++f) run_fold(f);
  } else {
    std::vector<std::thread> pool;
    std::mutex m;
    std::size_t next = 0;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t f;
          {
            std::lock_guard lock(m);
            if (next >= splits.size()) return;
            f = next++;
          }
          run_fold(f);
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  const auto env = eval::calibration_envelope(fold_q, fold_survived, cfg.evaluation.bins, cfg.evaluation.min_bin_count);
  json j = env.to_json();
  j["folds"] = splits.size();
  return j;
}

int cmd_evaluate(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = resolve_config(o);
  if (o.policy != "agent" && o.policy != "clinician") fail(kBadRequest, "--policy must be 'agent' or 'clinician'");
  ensure_dir(cfg.output_dir);
  const fs::path bxp = o.checkpoint.empty() ? cfg.output_dir / "agent.bxp" : fs::path(o.checkpoint);
  auto loaded = load_checkpoint(bxp);
  const auto& agent = loaded.agent;
  const auto& normalizer = loaded.normalizer;
  if (!(normalizer.caps() == cfg.sim.caps)) {
    fail(kCheckpointError, "checkpoint dose caps differ from the configured simulation caps");
  }
  const auto test = load_valid_cohort(cfg.test_path(), cfg.sim.caps, err);
  if (test.empty()) fail(kDataError, "test cohort '" + cfg.test_path().string() + "' has no patients");
  const bool clinician = o.policy == "clinician";
  const auto selection = selection_for(cfg, agent, derive_seed(cfg.seed, 11));

  auto table = eval::recommend_for_cohort(agent, normalizer, test, selection);
  if (clinician) {
    for (auto& d : table.decisions) {
      d.recommended = d.clinician;
      d.q_recommended = d.q_clinician;
    }
  }
  const auto safe_settings = eval::SafeRateSettings::from_caps(cfg.sim.caps, cfg.evaluation.zero_epsilon_fraction);

  json metrics;
  metrics["schema_version"] = 1;
  metrics["policy"] = o.policy;
  metrics["checkpoint_sha256"] = sha256_file(bxp);
  metrics["test_cohort_sha256"] = sha256_file(cfg.test_path());
  metrics["selection"] = {{"n_candidates", selection.n_candidates}, {"max_perturbation", selection.max_perturbation}};
  metrics["patients"] = table.episode_count;
  metrics["decisions"] = table.decisions.size();
  double q_clin = 0.0, q_rec = 0.0;
  for (const auto& d : table.decisions) {
    q_clin += d.q_clinician;
    q_rec += d.q_recommended;
  }
  const double nd = static_cast<double>(table.decisions.size());
  metrics["q_summary"] = {{"clinician_mean", q_clin / nd}, {"recommended_mean", q_rec / nd}};
  metrics["calibration"] = eval::q_survival_calibration(table, cfg.evaluation.bins, cfg.evaluation.min_bin_count).to_json();
  metrics["safe_rate"] = eval::safe_rate(table, safe_settings).to_json();

  json diffs = json::object();
  const auto caps = cfg.sim.caps.to_array();
  const auto names = cohort::action_names();
  for (std::size_t j = 0; j < cohort::kContinuousActions; ++j) {
    const auto edges = eval::default_difference_edges(caps[j], cfg.evaluation.difference_bins);
    json bins = json::array();
    for (const auto& b : eval::dose_difference_mortality(table, j, edges)) {
      bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"deaths", b.deaths}, {"mortality", b.mortality()}});
    }
    diffs[std::string(names[j])] = bins;
  }
  metrics["dose_difference"] = diffs;

  json dist = json::array();
  for (const auto& r : eval::dose_distribution(table, safe_settings)) {
    dist.push_back({{"t", r.t},
                    {"component", std::string(names[r.component])},
                    {"patients", r.patients},
                    {"clinician_mean", r.clinician_mean},
                    {"recommended_mean", r.recommended_mean},
                    {"clinician_nonzero", r.clinician_nonzero},
                    {"recommended_nonzero", r.recommended_nonzero}});
  }
  metrics["dose_distribution"] = dist;

  std::vector<fs::path> inputs{bxp, sidecar_path(bxp), cfg.test_path()};
  if (cfg.evaluation.folds >= 2) {
    const auto train = load_valid_cohort(cfg.train_path(), cfg.sim.caps, err);
    inputs.push_back(cfg.train_path());
    err << "training " << cfg.evaluation.folds << " cross-validation agents\n";
    metrics["calibration_envelope"] = cross_validation(cfg, train, test, selection);
  } else {
    metrics["calibration_envelope"] = nullptr;
  }

  if (cfg.evaluation.simulator_oracle) {
    const sim::SimWorld world(cfg.sim);
    const sim::BehaviorPolicy behavior(world);
    const eval::AgentPolicy agent_policy(agent, normalizer, selection);
    const sim::Policy& policy = clinician ? static_cast<const sim::Policy&>(behavior) : agent_policy;
    const double gamma = agent.hyper().gamma;
    const std::uint64_t rollout_seed = derive_seed(cfg.seed, 21);
    const auto v_behavior = sim::policy_value(world, behavior, cfg.evaluation.rollouts, gamma, rollout_seed);
    const auto v_policy = sim::policy_value(world, policy, cfg.evaluation.rollouts, gamma, rollout_seed);
    json simj;
    simj["gamma"] = gamma;
    simj["behavior_value"] = estimate_json(v_behavior);
    simj["policy_value"] = estimate_json(v_policy);
    simj["paired_difference"] = paired_difference(v_policy, v_behavior);
    if (cfg.evaluation.extrapolation_states > 0) {
      const auto generated = world.generate_with_states(cfg.evaluation.extrapolation_states, derive_seed(cfg.seed, 22));
      std::vector<sim::SimPatient> states;
      for (std::size_t i = 0; i < generated.prefixes.size(); ++i) {
        states.push_back(generated.prefixes[i][i % generated.prefixes[i].size()]);
      }
      const auto rep = sim::extrapolation_error(world, policy, eval::agent_critic(agent, normalizer), states,
                                                cfg.evaluation.extrapolation_rollouts, gamma, derive_seed(cfg.seed, 23));
      simj["extrapolation"] = rep.to_json();
    } else {
      simj["extrapolation"] = nullptr;
    }
    metrics["simulator"] = simj;
  } else {
    metrics["simulator"] = nullptr;
  }

  const fs::path metrics_path = cfg.output_dir / "metrics.json";
  write_text(metrics_path, dump(metrics));
  std::vector<fs::path> artifacts{metrics_path};
  for (const auto& name : export_plot_csvs(metrics, cfg.output_dir)) artifacts.push_back(cfg.output_dir / name);
  write_manifest(cfg, "evaluate", cfg.output_dir, inputs, artifacts);
  out << "wrote " << metrics_path.string() << "\n";
  return kOk;
}

int cmd_export_plots(const Options& o, std::ostream& out, std::ostream&) {
  const auto cfg = resolve_config(o);
  const fs::path metrics_path = cfg.output_dir / "metrics.json";
  std::ifstream in(metrics_path);
  if (!in) fail(kIoError, "cannot read '" + metrics_path.string() + "'");
  json metrics;
  try {
    metrics = json::parse(in);
  } catch (const std::exception& e) {
    fail(kDataError, "'" + metrics_path.string() + "' is not valid JSON: " + e.what());
  }
  std::vector<fs::path> artifacts;
  for (const auto& name : export_plot_csvs(metrics, cfg.output_dir)) artifacts.push_back(cfg.output_dir / name);
  write_manifest(cfg, "export-plots", cfg.output_dir, {metrics_path}, artifacts);
  out << "wrote " << artifacts.size() << " plot files to " << cfg.output_dir.string() << "\n";
  return kOk;
}

int cmd_recommend(const Options& o, std::ostream& out, std::ostream&) {
  const auto cfg = resolve_config(o);
  if (o.history.empty()) fail(kBadRequest, "recommend requires --history <csv>");
  const fs::path bxp = o.checkpoint.empty() ? cfg.output_dir / "agent.bxp" : fs::path(o.checkpoint);
  auto loaded = load_checkpoint(bxp);
  if (!fs::exists(o.history)) fail(kIoError, "history file '" + o.history + "' does not exist");
  auto parsed = cohort::load_cohort(o.history, loaded.normalizer.caps(), {}, cohort::EpisodeMode::prefix);
  if (!parsed.ok()) {
    std::ostringstream ss;
    ss << "history '" << o.history << "' failed validation:";
    for (const auto& d : parsed.errors) ss << "\n  line " << d.line << ": " << d.message;
    fail(kDataError, ss.str());
  }
  const auto& eps = parsed.cohort.episodes;
  if (eps.empty() || eps.front().steps.empty()) fail(kBadRequest, "history is empty: nothing to recommend from");
  if (eps.size() != 1) fail(kBadRequest, "history must contain exactly one patient, found " + std::to_string(eps.size()));
  // The last row is the observation awaiting a decision; its action cells are ignored.
  sim::PatientHistory history;
  for (const auto& s : eps.front().steps) {
    history.observations.push_back(s.obs);
    history.actions.push_back(s.action);
  }
  history.actions.pop_back();
  const auto selection = selection_for(cfg, loaded.agent, derive_seed(cfg.seed, 41));
  const eval::AgentPolicy policy(loaded.agent, loaded.normalizer, selection);
  Rng rng(selection.seed);
  const auto action = policy.act(std::span(&history, 1), rng).front();
  const double q = eval::agent_critic(loaded.agent, loaded.normalizer)(history, action);
  json rec = {{"patient_id", eps.front().patient_id},
              {"t", history.observations.size() - 1},
              {"act_liquid", action.liquid},
              {"act_vaso1", action.vaso1},
              {"act_vaso2", action.vaso2},
              {"act_vaso3", action.vaso3},
              {"act_hydrocort", static_cast<int>(action.hydrocortisone)},
              {"q", q}};
  out << dump(rec);
  ensure_dir(cfg.output_dir);
  write_manifest(cfg, "recommend", cfg.output_dir, {bxp, sidecar_path(bxp), o.history}, {}, rec);
  return kOk;
}

std::string csv_num(double v) { return cohort::format_double(v); }

}  // namespace

// ---- public helpers -------------------------------------------------------

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(kIoError, "cannot read '" + path.string() + "' for hashing");
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return h.finish();
}

std::string sha256_string(const std::string& bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.finish();
}

unsigned worker_count() {
  if (const char* env = std::getenv("BATCHRX_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<std::string> export_plot_csvs(const json& metrics, const fs::path& dir) {
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(name);
  };
  auto num = [](const json& v) { return v.is_null() ? std::string() : csv_num(v.get<double>()); };
  try {
    {
      std::ostringstream ss;
      ss << "lo,hi,count,survivors,survival_rate\n";
      for (const auto& b : metrics.at("calibration").at("bins")) {
        ss << num(b.at("lo")) << ',' << num(b.at("hi")) << ',' << b.at("count").get<std::size_t>() << ','
           << b.at("survivors").get<std::size_t>() << ',' << num(b.at("survival_rate")) << '\n';
      }
      emit("calibration.csv", ss.str());
    }
    if (metrics.contains("calibration_envelope") && !metrics.at("calibration_envelope").is_null()) {
      const auto& env = metrics.at("calibration_envelope");
      std::ostringstream ss;
      ss << "lo,hi,lower,upper\n";
      const auto& edges = env.at("edges");
      for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        ss << num(edges[b]) << ',' << num(edges[b + 1]) << ',' << num(env.at("lower")[b]) << ','
           << num(env.at("upper")[b]) << '\n';
      }
      emit("calibration_envelope.csv", ss.str());
    }
    {
      std::ostringstream ss;
      ss << "component,lo,hi,count,deaths,mortality\n";
      for (const auto& [component, bins] : metrics.at("dose_difference").items()) {
        for (const auto& b : bins) {
          ss << component << ',' << num(b.at("lo")) << ',' << num(b.at("hi")) << ',' << b.at("count").get<std::size_t>()
             << ',' << b.at("deaths").get<std::size_t>() << ',' << num(b.at("mortality")) << '\n';
        }
      }
      emit("dose_difference.csv", ss.str());
    }
    {
      std::ostringstream ss;
      ss << "t,component,patients,clinician_mean,recommended_mean,clinician_nonzero,recommended_nonzero\n";
      for (const auto& r : metrics.at("dose_distribution")) {
        ss << r.at("t").get<std::size_t>() << ',' << r.at("component").get<std::string>() << ','
           << r.at("patients").get<std::size_t>() << ',' << num(r.at("clinician_mean")) << ','
           << num(r.at("recommended_mean")) << ',' << num(r.at("clinician_nonzero")) << ','
           << num(r.at("recommended_nonzero")) << '\n';
      }
      emit("dose_distribution.csv", ss.str());
    }
  } catch (const json::exception& e) {
    fail(kDataError, std::string("metrics document is missing expected fields: ") + e.what());
  }
  return written;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"batchrx: batch-constrained recurrent dosing policies for sepsis-style cohorts", "batchrx"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub, bool checkpoint, bool history) {
    sub->add_option("--config", o.config_path, "Run configuration (JSON)");
    sub->add_option("--seed", seed, "Override the configured seed");
    sub->add_option("--out", o.out_dir, "Override the output directory");
    if (checkpoint) sub->add_option("--checkpoint", o.checkpoint, "Agent checkpoint (.bxp)");
    if (history) sub->add_option("--history", o.history, "One patient's history in cohort CSV schema");
  };
  auto* simulate = app.add_subcommand("simulate", "Generate synthetic train/test cohorts");
  common(simulate, false, false);
  auto* train = app.add_subcommand("train", "Train an agent on the training cohort");
  common(train, true, false);
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test cohort");
  common(evaluate, true, false);
  evaluate->add_option("--policy", o.policy, "Policy to evaluate: agent (default) or clinician");
  auto* recommend = app.add_subcommand("recommend", "Recommend the next dose for one patient history");
  common(recommend, true, true);
  auto* plots = app.add_subcommand("export-plots", "Rewrite plot CSVs from an existing metrics.json");
  common(plots, false, false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kBadRequest;
  }
  if (app.get_subcommands().front()->count("--seed") > 0) o.seed = seed;

  try {
    if (simulate->parsed()) return cmd_simulate(o, out, err);
    if (train->parsed()) return cmd_train(o, out, err);
    if (evaluate->parsed()) return cmd_evaluate(o, out, err);
    if (recommend->parsed()) return cmd_recommend(o, out, err);
    if (plots->parsed()) return cmd_export_plots(o, out, err);
  } catch (const CommandError& e) {
    err << "error: " << e.what() << "\n";
    return e.code;
  } catch (const config::ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kIoError;
  }
  return kBadRequest;
}

}  // namespace batchrx::cli
