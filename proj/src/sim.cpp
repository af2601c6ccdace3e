#include "batchrx/sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace batchrx::sim {

using cohort::Cohort;
using cohort::Episode;

// ---- parameters -----------------------------------------------------------

#define BATCHRX_SIM_FIELDS(X)                                                                            \
  X(initial_severity_mean) X(initial_severity_sd) X(initial_tone_mean) X(initial_tone_sd)               \
  X(initial_fluid_sd) X(severity_decay) X(severity_drift) X(hypoperfusion_gain) X(fluid_overload_gain)  \
  X(fluid_overload_threshold) X(vaso3_stress_gain) X(hydrocortisone_gain) X(tone_decay)                 \
  X(tone_severity_coupling) X(fluid_tone_gain) X(fluid_scale) X(vaso1_gain) X(vaso1_scale)              \
  X(vaso2_gain) X(vaso2_scale) X(vaso3_gain) X(vaso3_scale) X(fluid_decay) X(severity_noise)            \
  X(tone_noise) X(fluid_noise) X(observation_noise) X(mortality_intercept) X(mortality_slope)           \
  X(behavior_map_target) X(behavior_fluid_base) X(behavior_fluid_per_mmhg) X(behavior_vaso1_threshold)  \
  X(behavior_vaso1_per_mmhg) X(behavior_vaso2_trigger) X(behavior_vaso2_dose)                           \
  X(behavior_vaso3_probability) X(behavior_vaso3_dose) X(behavior_hydrocortisone_sofa)                  \
  X(behavior_hydrocortisone_probability) X(behavior_dose_noise) X(episode_length)

void SimParams::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("sim params: " + m); };
  for (double v : {initial_severity_sd, initial_tone_sd, initial_fluid_sd, severity_noise, tone_noise, fluid_noise,
                   observation_noise, behavior_dose_noise}) {
    if (!(v >= 0.0)) fail("noise scales must be >= 0");
  }
  for (double v : {vaso1_gain, vaso2_gain, vaso3_gain}) {
    if (!(v > 0.0)) fail("vasopressor gains must be positive");
  }
  for (double v : {fluid_scale, vaso1_scale, vaso2_scale, vaso3_scale}) {
    if (!(v > 0.0)) fail("dose-response scales must be positive");
  }
  if (!(behavior_vaso3_probability >= 0.0 && behavior_vaso3_probability <= 1.0) ||
      !(behavior_hydrocortisone_probability >= 0.0 && behavior_hydrocortisone_probability <= 1.0)) {
    fail("behavior probabilities must lie in [0, 1]");
  }
  if (episode_length < 1 || episode_length > cohort::kMaxSteps) fail("episode_length must lie in 1..12");
  for (double c : caps.to_array()) {
    if (!(c > 0.0)) fail("dose caps must be positive");
  }
}

nlohmann::json SimParams::to_json() const {
  nlohmann::json j;
#define X(name) j[#name] = name;
  BATCHRX_SIM_FIELDS(X)
#undef X
  j["caps"] = {{"liquid", caps.liquid}, {"vaso1", caps.vaso1}, {"vaso2", caps.vaso2}, {"vaso3", caps.vaso3}};
  return j;
}

SimParams SimParams::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("sim params: expected an object");
  SimParams p;
  const auto known = p.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("sim params: unknown key '" + key + "'");
  }
#define X(name) \
  if (j.contains(#name)) j.at(#name).get_to(p.name);
  BATCHRX_SIM_FIELDS(X)
#undef X
  if (j.contains("caps")) {
    const auto& c = j.at("caps");
    for (const auto& [key, value] : c.items()) {
      if (key != "liquid" && key != "vaso1" && key != "vaso2" && key != "vaso3") {
        throw std::invalid_argument("sim params: unknown caps key '" + key + "'");
      }
    }
    if (c.contains("liquid")) c.at("liquid").get_to(p.caps.liquid);
    if (c.contains("vaso1")) c.at("vaso1").get_to(p.caps.vaso1);
    if (c.contains("vaso2")) c.at("vaso2").get_to(p.caps.vaso2);
    if (c.contains("vaso3")) c.at("vaso3").get_to(p.caps.vaso3);
  }
  p.validate();
  return p;
}

#undef BATCHRX_SIM_FIELDS

SimParams SimParams::noiseless() const {
  SimParams p = *this;
  p.initial_severity_sd = p.initial_tone_sd = p.initial_fluid_sd = 0.0;
  p.severity_noise = p.tone_noise = p.fluid_noise = 0.0;
  p.observation_noise = 0.0;
  p.behavior_dose_noise = 0.0;
  return p;
}

// ---- world ----------------------------------------------------------------

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

}  // namespace

SimWorld::SimWorld(SimParams params) : p_(std::move(params)) { p_.validate(); }

PatientTraits SimWorld::sample_traits(Rng& rng) const {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  const double spread = p_.observation_noise;
  const double u_gender = u(rng);
  const double z_age = n(rng);
  const double u_eth = u(rng);
  const double z_elix = n(rng);
  PatientTraits t;
  t.gender = spread > 0.0 && u_gender < 0.45 ? 1.0 : 0.0;
  t.age = std::clamp(66.0 + 14.0 * spread * z_age, 18.0, 95.0);
  t.ethnicity = spread > 0.0 ? std::floor(u_eth * 5.0) : 0.0;
  t.elixhauser = std::max(0.0, std::round(4.0 + 2.5 * spread * z_elix));
  return t;
}

LatentState SimWorld::sample_initial(Rng& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  const double zs = n(rng);
  const double zt = n(rng);
  const double zf = n(rng);
  return {p_.initial_severity_mean + p_.initial_severity_sd * zs, p_.initial_tone_mean + p_.initial_tone_sd * zt,
          p_.initial_fluid_sd * zf};
}

LatentState SimWorld::step(const LatentState& s, const DoseAction& a, double z_severity, double z_tone,
                           double z_fluid) const {
  LatentState next;
  const double response = p_.fluid_tone_gain * std::tanh(a.liquid / p_.fluid_scale) +
                          p_.vaso1_gain * std::tanh(a.vaso1 / p_.vaso1_scale) +
                          p_.vaso2_gain * std::tanh(a.vaso2 / p_.vaso2_scale) +
                          p_.vaso3_gain * std::tanh(a.vaso3 / p_.vaso3_scale);
  next.tone = p_.tone_decay * s.tone + p_.tone_severity_coupling * s.severity + response + p_.tone_noise * z_tone;
  next.fluid = p_.fluid_decay * s.fluid + a.liquid / 1000.0 + p_.fluid_noise * z_fluid;
  const double stress = a.vaso3 / p_.vaso3_scale;
  next.severity = p_.severity_decay * s.severity + p_.severity_drift +
                  p_.hypoperfusion_gain * std::max(0.0, -next.tone) +
                  p_.fluid_overload_gain * std::max(0.0, next.fluid - p_.fluid_overload_threshold) +
                  p_.vaso3_stress_gain * stress * stress - p_.hydrocortisone_gain * (a.hydrocortisone >= 0.5 ? 1.0 : 0.0) +
                  p_.severity_noise * z_severity;
  return next;
}

LatentState SimWorld::transition(const LatentState& s, const DoseAction& a, Rng& rng) const {
  std::normal_distribution<double> n(0.0, 1.0);
  const double zs = n(rng);
  const double zt = n(rng);
  const double zf = n(rng);
  return step(s, a, zs, zt, zf);
}

Observation SimWorld::observe(const LatentState& s, const PatientTraits& traits, const DoseAction& previous,
                             Rng& rng) const {
  using namespace cohort;
  // A fixed number of draws per call keeps world streams aligned across policies.
  std::normal_distribution<double> n(0.0, 1.0);
  std::array<double, kFeatureCount> z{};
  for (double& v : z) v = n(rng);
  const double k = p_.observation_noise;
  const double sev = s.severity;
  const double sp = softplus(sev);
  Observation o{};
  o[kGender] = traits.gender;
  o[kAge] = traits.age;
  o[kEthnicity] = traits.ethnicity;
  o[kElixhauser] = traits.elixhauser;

  o[kHeartRate] = 85.0 + 7.0 * sev - 6.0 * s.tone + 5.0 * k * z[kHeartRate];
  o[kMap] = 75.0 + 10.0 * s.tone + 3.0 * k * z[kMap];
  o[kTemperature] = 37.0 + 0.3 * sev + 0.4 * k * z[kTemperature];
  o[kRespRate] = 16.0 + 2.0 * sev + 2.0 * k * z[kRespRate];
  o[kSpo2] = std::clamp(98.0 - 1.2 * sev + 1.0 * k * z[kSpo2], 60.0, 100.0);
  o[kGcs] = std::clamp(15.0 - 1.3 * std::max(0.0, sev - 1.0) + 0.7 * k * z[kGcs], 3.0, 15.0);

  struct Lab {
    Feature f;
    double base;
    double per_severity;
    double noise;
    double lo;
  };
  static constexpr Lab labs[] = {
      {kWbc, 11.0, 1.5, 2.0, 0.1},       {kNeutrophils, 80.0, 1.5, 5.0, 0.0}, {kLymphocytes, 10.0, -1.0, 3.0, 0.0},
      {kPlatelets, 220.0, -20.0, 30.0, 5.0}, {kHemoglobin, 11.0, -0.3, 1.0, 3.0}, {kAlt, 40.0, 15.0, 10.0, 1.0},
      {kAst, 50.0, 20.0, 12.0, 1.0},     {kBilirubin, 0.9, 0.4, 0.3, 0.1},     {kBun, 25.0, 6.0, 5.0, 1.0},
      {kCreatinine, 1.1, 0.35, 0.2, 0.2}, {kAlbumin, 3.2, -0.2, 0.3, 1.0},    {kGlucose, 140.0, 10.0, 20.0, 40.0},
      {kPotassium, 4.1, 0.1, 0.3, 2.0},  {kSodium, 139.0, 0.0, 3.0, 110.0},   {kCalcium, 8.4, -0.15, 0.4, 5.0},
      {kChloride, 104.0, 0.5, 3.0, 80.0}, {kPh, 7.38, -0.025, 0.03, 6.8},     {kPao2, 110.0, -8.0, 20.0, 30.0},
      {kPaco2, 39.0, -1.0, 4.0, 15.0},   {kBicarbonate, 23.0, -1.2, 2.0, 5.0}, {kPfRatio, 300.0, -35.0, 40.0, 40.0},
      {kPt, 14.0, 1.0, 1.0, 9.0},        {kAptt, 33.0, 2.5, 4.0, 20.0},
  };
  for (const Lab& lab : labs) o[lab.f] = std::max(lab.lo, lab.base + lab.per_severity * sev + lab.noise * k * z[lab.f]);

  o[kLactate] = std::max(0.3, 1.0 + 0.9 * sp + 0.25 * k * z[kLactate]);
  o[kSofa] = std::clamp(2.0 + 3.0 * sev + 1.0 * k * z[kSofa], 0.0, 24.0);
  o[kUrine] = std::max(0.0, 120.0 - 15.0 * sev + 15.0 * s.tone + 20.0 * k * z[kUrine]);

  o[kPrevFluid] = previous.liquid;
  o[kPrevVaso1] = previous.vaso1;
  o[kPrevVaso2] = previous.vaso2;
  o[kPrevVaso3] = previous.vaso3;
  o[kPrevHydrocortisone] = previous.hydrocortisone;
  return o;
}

double SimWorld::survival_probability(double final_severity) const {
  return 1.0 - logistic(p_.mortality_intercept + p_.mortality_slope * final_severity);
}

DoseAction SimWorld::behavior(const PatientHistory& history, Rng& rng) const {
  using namespace cohort;
  if (history.observations.empty()) throw std::invalid_argument("behavior: empty history");
  const Observation& o = history.observations.back();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  // Fixed draw count per decision.
  double z[4];
  for (double& v : z) v = n(rng);
  const double u_vaso3 = u(rng);
  const double u_hc = u(rng);
  const double sigma = p_.behavior_dose_noise;
  auto noisy = [&](double dose, int i) { return dose * std::exp(sigma * z[i] - 0.5 * sigma * sigma); };

  const double map = o[kMap];
  DoseAction a;
  a.liquid = noisy(p_.behavior_fluid_base + p_.behavior_fluid_per_mmhg * std::max(0.0, p_.behavior_map_target - map), 0);
  const double vaso1 = map < p_.behavior_vaso1_threshold
                           ? p_.behavior_vaso1_per_mmhg * (p_.behavior_vaso1_threshold - map + 2.0)
                           : 0.0;
  a.vaso1 = noisy(vaso1, 1);
  a.vaso2 = vaso1 >= p_.behavior_vaso2_trigger ? noisy(p_.behavior_vaso2_dose, 2) : 0.0;
  a.vaso3 = map < p_.behavior_vaso1_threshold && u_vaso3 < p_.behavior_vaso3_probability
                ? noisy(p_.behavior_vaso3_dose, 3)
                : 0.0;
  const bool on_hydrocortisone = !history.actions.empty() && history.actions.back().hydrocortisone >= 0.5;
  a.hydrocortisone =
      on_hydrocortisone || (o[kSofa] >= p_.behavior_hydrocortisone_sofa && u_hc < p_.behavior_hydrocortisone_probability)
          ? 1.0
          : 0.0;
  const auto& caps = p_.caps;
  a.liquid = std::min(a.liquid, caps.liquid);
  a.vaso1 = std::min(a.vaso1, caps.vaso1);
  a.vaso2 = std::min(a.vaso2, caps.vaso2);
  a.vaso3 = std::min(a.vaso3, caps.vaso3);
  return a;
}

std::vector<DoseAction> BehaviorPolicy::act(std::span<const PatientHistory> histories, Rng& rng) const {
  std::vector<DoseAction> out;
  out.reserve(histories.size());
  for (const auto& h : histories) out.push_back(world_.behavior(h, rng));
  return out;
}

SimPatient SimWorld::admit(Rng& rng) const {
  SimPatient p;
  p.traits = sample_traits(rng);
  p.latent = sample_initial(rng);
  p.history.observations.push_back(observe(p.latent, p.traits, DoseAction{}, rng));
  return p;
}

SimWorld::Generated SimWorld::generate_with_states(std::size_t n_patients, std::uint64_t seed,
                                                   std::size_t id_offset) const {
  if (n_patients < 1) throw std::invalid_argument("generate_cohort: need at least one patient");
  Generated g;
  g.cohort.episodes.reserve(n_patients);
  g.prefixes.reserve(n_patients);
  g.final_states.reserve(n_patients);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n_patients; ++i) {
    Rng rng(derive_seed(seed, i));
    SimPatient patient = admit(rng);
    std::vector<SimPatient> prefixes;
    for (std::size_t t = 0; t < p_.episode_length; ++t) {
      prefixes.push_back(patient);
      const DoseAction a = behavior(patient.history, rng);
      patient.history.actions.push_back(a);
      patient.latent = transition(patient.latent, a, rng);
      if (t + 1 < p_.episode_length) {
        patient.history.observations.push_back(observe(patient.latent, patient.traits, a, rng));
      }
    }
    Episode ep;
    ep.patient_id = "P" + std::to_string(id_offset + i);
    ep.survived = u(rng) < survival_probability(patient.latent.severity);
    for (std::size_t t = 0; t < p_.episode_length; ++t) {
      cohort::Step s;
      s.obs = patient.history.observations[t];
      s.action = patient.history.actions[t];
      ep.steps.push_back(s);
    }
    cohort::label_rewards(ep);
    g.cohort.episodes.push_back(std::move(ep));
    g.prefixes.push_back(std::move(prefixes));
    g.final_states.push_back(patient.latent);
  }
  return g;
}

Cohort SimWorld::generate_cohort(std::size_t n_patients, std::uint64_t seed, std::size_t id_offset) const {
  return generate_with_states(n_patients, seed, id_offset).cohort;
}

// ---- Monte-Carlo oracles --------------------------------------------------

namespace {

Estimate summarize(std::vector<double> returns) {
  Estimate e;
  e.rollouts = returns.size();
  if (returns.empty()) return e;
  double sum = 0.0;
  for (double r : returns) sum += r;
  e.mean = sum / static_cast<double>(returns.size());
  if (returns.size() > 1) {
    double ss = 0.0;
    for (double r : returns) ss += (r - e.mean) * (r - e.mean);
    e.standard_error = std::sqrt(ss / static_cast<double>(returns.size() - 1) / static_cast<double>(returns.size()));
  }
  e.returns = std::move(returns);
  return e;
}

}  // namespace

std::vector<double> rollout_returns(const SimWorld& world, const Policy& policy, std::vector<SimPatient> starts,
                                    std::span<const std::uint64_t> world_seeds, double gamma, Rng& policy_rng,
                                    std::span<const DoseAction> first_actions) {
  const std::size_t n = starts.size();
  if (world_seeds.size() != n) throw std::invalid_argument("rollout_returns: one world seed per patient required");
  if (!first_actions.empty() && first_actions.size() != n) {
    throw std::invalid_argument("rollout_returns: first_actions must be empty or one per patient");
  }
  const std::size_t length = world.params().episode_length;
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (auto s : world_seeds) rngs.emplace_back(s);
  std::vector<double> returns(n, 0.0);
  std::vector<double> discount(n, 1.0);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& h = starts[i].history;
    if (starts[i].t() >= length) continue;
    if (h.observations.size() != h.actions.size() + 1) {
      throw std::invalid_argument("rollout_returns: history must end with an observation awaiting a decision");
    }
    active.push_back(i);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool first = true;
  while (!active.empty()) {
    std::vector<DoseAction> actions;
    if (first && !first_actions.empty()) {
      for (auto i : active) actions.push_back(first_actions[i]);
    } else {
      std::vector<PatientHistory> histories;
      histories.reserve(active.size());
      for (auto i : active) histories.push_back(starts[i].history);
      actions = policy.act(histories, policy_rng);
    }
    first = false;
    std::vector<std::size_t> still;
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::size_t i = active[k];
      SimPatient& p = starts[i];
      const DoseAction& a = actions[k];
      p.history.actions.push_back(a);
      p.latent = world.transition(p.latent, a, rngs[i]);
      double reward;
      if (p.t() >= length) {
        reward = cohort::terminal_reward(u(rngs[i]) < world.survival_probability(p.latent.severity));
      } else {
        p.history.observations.push_back(world.observe(p.latent, p.traits, a, rngs[i]));
        const auto& obs = p.history.observations;
        reward = cohort::compute_reward(obs[obs.size() - 2], obs.back());
        still.push_back(i);
      }
      returns[i] += discount[i] * reward;
      discount[i] *= gamma;
    }
    active = std::move(still);
  }
  return returns;
}

Estimate monte_carlo_q(const SimWorld& world, const Policy& policy, const SimPatient& prefix, std::size_t rollouts,
                       double gamma, std::uint64_t seed, const std::optional<DoseAction>& first_action) {
  if (rollouts < 1) throw std::invalid_argument("monte_carlo_q: rollouts must be >= 1");
  std::vector<std::uint64_t> seeds(rollouts);
  for (std::size_t r = 0; r < rollouts; ++r) seeds[r] = derive_seed(seed, r);
  std::vector<DoseAction> forced;
  if (first_action) forced.assign(rollouts, *first_action);
  Rng policy_rng(derive_seed(seed, ~std::uint64_t{0}));
  return summarize(rollout_returns(world, policy, std::vector<SimPatient>(rollouts, prefix), seeds, gamma,
                                   policy_rng, forced));
}

Estimate policy_value(const SimWorld& world, const Policy& policy, std::size_t rollouts, double gamma,
                      std::uint64_t seed) {
  if (rollouts < 1) throw std::invalid_argument("policy_value: rollouts must be >= 1");
  std::vector<SimPatient> starts;
  std::vector<std::uint64_t> seeds(rollouts);
  for (std::size_t r = 0; r < rollouts; ++r) {
    Rng admission(derive_seed(seed, r));
    starts.push_back(world.admit(admission));
    seeds[r] = derive_seed(derive_seed(seed, r), 1);
  }
  Rng policy_rng(derive_seed(seed, ~std::uint64_t{0}));
  return summarize(rollout_returns(world, policy, std::move(starts), seeds, gamma, policy_rng));
}

nlohmann::json ExtrapolationReport::to_json() const {
  return {{"mean_abs_error", mean_abs_error}, {"true_q", true_q}, {"critic_q", critic_q}, {"abs_error", abs_error}};
}

ExtrapolationReport extrapolation_error(const SimWorld& world, const Policy& policy, const CriticFn& critic,
                                        std::span<const SimPatient> states, std::size_t rollouts, double gamma,
                                        std::uint64_t seed) {
  if (states.empty()) throw std::invalid_argument("extrapolation_error: no states");
  ExtrapolationReport rep;
  std::vector<PatientHistory> histories;
  for (const auto& s : states) histories.push_back(s.history);
  Rng policy_rng(derive_seed(seed, ~std::uint64_t{0}));
  const auto chosen = policy.act(histories, policy_rng);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const double q_true = monte_carlo_q(world, policy, states[i], rollouts, gamma, derive_seed(seed, i), chosen[i]).mean;
    const double q_critic = critic(states[i].history, chosen[i]);
    rep.true_q.push_back(q_true);
    rep.critic_q.push_back(q_critic);
    rep.abs_error.push_back(std::abs(q_true - q_critic));
  }
  double sum = 0.0;
  for (double e : rep.abs_error) sum += e;
  rep.mean_abs_error = sum / static_cast<double>(rep.abs_error.size());
  return rep;
}

}  // namespace batchrx::sim
