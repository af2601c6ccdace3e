#include <doctest.h>

#include <cmath>

#include "batchrx/eval.hpp"

using namespace batchrx;
using namespace batchrx::eval;

namespace {

Decision decision(std::size_t episode, std::size_t t, DoseAction clinician, DoseAction recommended, bool survived,
                  double q = 0.0) {
  Decision d;
  d.episode = episode;
  d.t = t;
  d.clinician = clinician;
  d.recommended = recommended;
  d.q_clinician = q;
  d.survived = survived;
  return d;
}

cohort::Cohort synthetic_cohort(std::size_t patients, std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  cohort::Cohort c;
  for (std::size_t i = 0; i < patients; ++i) {
    cohort::Episode ep;
    ep.patient_id = "X" + std::to_string(i);
    ep.survived = u(rng) < 0.7;
    for (std::size_t t = 0; t < steps; ++t) {
      cohort::Step s;
      s.obs.fill(1.0);
      s.obs[cohort::kGcs] = 15;
      s.action = {u(rng) * 800, u(rng) < 0.5 ? 0.0 : u(rng), u(rng) < 0.8 ? 0.0 : 0.04, 0.0, u(rng) < 0.3 ? 1.0 : 0.0};
      ep.steps.push_back(s);
    }
    cohort::label_rewards(ep);
    c.episodes.push_back(ep);
  }
  return c;
}

const SafeRateSettings kSettings = SafeRateSettings::from_caps(cohort::DoseCaps{});

}  // namespace

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4};
  CHECK(*spearman(x, std::vector<double>{2, 5, 7, 100}) == doctest::Approx(1.0));
  CHECK(*spearman(x, std::vector<double>{9, 5, 3, 1}) == doctest::Approx(-1.0));
  CHECK(*spearman(std::vector<double>{1, 2, 3}, std::vector<double>{2, 1, 3}) == doctest::Approx(0.5));
  CHECK_FALSE(spearman(x, std::vector<double>{1, 1, 1, 1}).has_value());
  CHECK_FALSE(spearman(std::vector<double>{1}, std::vector<double>{1}).has_value());
  // Ties use average ranks: x ranks (1, 2.5, 2.5, 4) against y ranks (1, 2, 3, 4).
  const std::vector<double> rx{1, 2.5, 2.5, 4}, ry{1, 2, 3, 4};
  double mx = 2.5, sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - mx);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - mx) * (ry[i] - mx);
  }
  CHECK(*spearman(std::vector<double>{0, 5, 5, 9}, std::vector<double>{1, 2, 3, 4}) ==
        doctest::Approx(sxy / std::sqrt(sxx * syy)));
}

TEST_CASE("calibration") {
  SUBCASE("two-bin case: survivors at +25, deaths at -25") {
    std::vector<double> q;
    std::vector<bool> survived;
    for (int i = 0; i < 30; ++i) {
      q.push_back(i % 2 ? 25.0 : -25.0);
      survived.push_back(i % 2 == 1);
    }
    const auto rep = q_survival_calibration(q, survived, 2, 10);
    REQUIRE(rep.bins.size() == 2);
    CHECK(rep.bins[0].survival_rate() == 0.0);
    CHECK(rep.bins[1].survival_rate() == 1.0);
    CHECK(rep.bins[0].count + rep.bins[1].count == 30);
    REQUIRE(rep.spearman.has_value());
    CHECK(*rep.spearman == doctest::Approx(1.0));
  }
  SUBCASE("all survivors: rates are 1 and correlation is undefined") {
    std::vector<double> q;
    for (int i = 0; i < 100; ++i) q.push_back(i * 0.3);
    const std::vector<bool> survived(100, true);
    const auto rep = q_survival_calibration(q, survived, 5, 10);
    for (const auto& b : rep.bins) CHECK(b.survival_rate() == 1.0);
    CHECK_FALSE(rep.spearman.has_value());
  }
  SUBCASE("bins partition every pair, and sparse bins are excluded from the correlation") {
    Rng rng(2);
    std::normal_distribution<double> n(0.0, 5.0);
    std::vector<double> q;
    std::vector<bool> survived;
    for (int i = 0; i < 500; ++i) {
      q.push_back(n(rng));
      survived.push_back(q.back() + n(rng) > 0);
    }
    const auto rep = q_survival_calibration(q, survived, 20, 10);
    std::size_t total = 0;
    std::vector<double> mids, rates;
    for (const auto& b : rep.bins) {
      total += b.count;
      if (b.count >= 10) {
        mids.push_back(b.midpoint());
        rates.push_back(b.survival_rate());
      }
    }
    CHECK(total == 500);
    CHECK(*rep.spearman == doctest::Approx(*spearman(mids, rates)));
    CHECK(*rep.spearman > 0.6);
  }
  SUBCASE("shuffled labels destroy the correlation") {
    Rng rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> q;
    for (int i = 0; i < 2000; ++i) q.push_back(n(rng));
    double mean_abs = 0.0;
    const int shuffles = 20;
    for (int s = 0; s < shuffles; ++s) {
      std::vector<bool> survived;
      std::bernoulli_distribution coin(0.7);
      for (int i = 0; i < 2000; ++i) survived.push_back(coin(rng));
      mean_abs += std::abs(q_survival_calibration(q, survived, 10, 50).spearman.value_or(0.0)) / shuffles;
    }
    CHECK(mean_abs < 0.45);
  }
  SUBCASE("explicit edges clamp outliers into the end bins") {
    const std::vector<double> edges{0.0, 1.0, 2.0};
    const std::vector<double> q{-5.0, 0.5, 1.5, 2.0, 9.0};
    const auto rep = q_survival_calibration(q, std::vector<bool>(5, true), 2, 1, edges);
    CHECK(rep.bins[0].count == 2);
    CHECK(rep.bins[1].count == 3);
  }
  SUBCASE("envelope spans the per-fold rates on a shared grid") {
    const std::vector<std::vector<double>> fq{{0.0, 0.0, 1.0, 1.0}, {0.0, 1.0, 1.0, 2.0}};
    const std::vector<std::vector<bool>> fs{{false, true, true, true}, {false, false, true, true}};
    const auto env = calibration_envelope(fq, fs, 2, 1);
    REQUIRE(env.edges.size() == 3);
    CHECK(env.edges.front() == 0.0);
    CHECK(env.edges.back() == 2.0);
    // Fold 0: bin0 = {0,0} -> 0.5, bin1 = {1,1} -> 1.0. Fold 1: bin0 = {0} -> 0, bin1 = {1,1,2} -> 2/3.
    CHECK(*env.lower[0] == doctest::Approx(0.0));
    CHECK(*env.upper[0] == doctest::Approx(0.5));
    CHECK(*env.lower[1] == doctest::Approx(2.0 / 3.0));
    CHECK(*env.upper[1] == doctest::Approx(1.0));
    CHECK(env.fold_spearman.size() == 2);
  }
}

TEST_CASE("safe rate") {
  const DoseAction base{400, 0.2, 0.03, 0.1, 1};
  SUBCASE("replaying logged actions gives exactly 1") {
    const auto table = replay_recommendations(synthetic_cohort(25, 12, 1));
    const auto rep = safe_rate(table, kSettings);
    CHECK(rep.overall == 1.0);
    for (double m : rep.marginal) CHECK(m == 1.0);
    CHECK(rep.patients == 25);
  }
  SUBCASE("ratio 1.5 on every component is unsafe") {
    RecommendationTable t;
    t.episode_count = 1;
    t.decisions.push_back(decision(0, 0, base, {600, 0.3, 0.045, 0.15, 1}, true));
    CHECK(safe_rate(t, kSettings).overall == 0.0);
  }
  SUBCASE("two patients by two steps with one unsafe step gives 0.75") {
    RecommendationTable t;
    t.episode_count = 2;
    t.decisions.push_back(decision(0, 0, base, base, true));
    t.decisions.push_back(decision(0, 1, base, {400, 0.2, 0.03, 0.1, 0}, true));  // hydrocortisone disagrees
    t.decisions.push_back(decision(1, 0, base, base, false));
    t.decisions.push_back(decision(1, 1, base, {440, 0.22, 0.027, 0.11, 1}, false));
    const auto rep = safe_rate(t, kSettings);
    CHECK(std::abs(rep.overall - (0.5 + 1.0) / 2.0) <= 1e-15);
    CHECK(rep.marginal[4] == 0.75);
    CHECK(rep.marginal[0] == 1.0);
    CHECK(rep.steps_per_patient == std::vector<std::size_t>{2, 2});
    for (double m : rep.marginal) CHECK(rep.overall <= m);
  }
  SUBCASE("zero clinician dose uses the absolute threshold") {
    CHECK(component_safe(1, 0.0, 0.0, kSettings));
    CHECK(component_safe(1, 0.039, 0.0, kSettings));
    CHECK_FALSE(component_safe(1, 0.041, 0.0, kSettings));
    CHECK_FALSE(component_safe(1, 0.0, 0.5, kSettings));
    CHECK_FALSE(component_safe(0, 70.0, 100.0, kSettings));  // open band
    CHECK(component_safe(0, 71.0, 100.0, kSettings));
  }
  SUBCASE("scale consistency") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    RecommendationTable t, scaled;
    t.episode_count = scaled.episode_count = 10;
    for (std::size_t p = 0; p < 10; ++p) {
      for (std::size_t s = 0; s < 3; ++s) {
        const DoseAction c{u(rng) * 100, u(rng), u(rng) * 0.1, u(rng), 0};
        const DoseAction r{c.liquid * u(rng), c.vaso1 * u(rng), c.vaso2 * u(rng), c.vaso3 * u(rng), 0};
        t.decisions.push_back(decision(p, s, c, r, true));
        auto times = [](DoseAction a, double k) { return DoseAction{a.liquid * k, a.vaso1 * k, a.vaso2 * k, a.vaso3 * k, a.hydrocortisone}; };
        scaled.decisions.push_back(decision(p, s, times(c, 3.7), times(r, 3.7), true));
      }
    }
    CHECK(safe_rate(t, kSettings).overall == safe_rate(scaled, kSettings).overall);
  }
  SUBCASE("empty table is rejected") { CHECK_THROWS(safe_rate(RecommendationTable{}, kSettings)); }
}

TEST_CASE("dose difference vs mortality") {
  SUBCASE("replay puts all mass in the zero bin, with zero mortality for survivors") {
    auto c = synthetic_cohort(10, 12, 4);
    for (auto& ep : c.episodes) ep.survived = true;
    const auto edges = default_difference_edges(2000.0);
    REQUIRE(edges.size() == 12);
    CHECK(edges[5] == doctest::Approx(-100.0));
    CHECK(edges[6] == doctest::Approx(100.0));
    const auto bins = dose_difference_mortality(replay_recommendations(c), 0, edges);
    std::size_t total = 0;
    for (std::size_t i = 0; i < bins.size(); ++i) {
      total += bins[i].count;
      CHECK(bins[i].mortality() == 0.0);
      if (i != 5) CHECK(bins[i].count == 0);
    }
    CHECK(total == 120);
  }
  SUBCASE("deaths only at large differences give a U shape") {
    RecommendationTable t;
    const double diffs[] = {-1.8, -1.5, -0.2, 0.0, 0.1, 1.6, 1.9};
    std::size_t ep = 0;
    for (double d : diffs) {
      for (int k = 0; k < 4; ++k) {
        const DoseAction c{0, 0.5, 0, 0, 0};
        const DoseAction r{0, 0.5 + d, 0, 0, 0};
        t.decisions.push_back(decision(ep++, 0, c, r, std::abs(d) <= 1.0));
      }
    }
    t.episode_count = ep;
    const std::vector<double> edges{-2.0, -1.0, 1.0, 2.0};
    const auto bins = dose_difference_mortality(t, 1, edges);
    REQUIRE(bins.size() == 3);
    CHECK(bins[0].mortality() == 1.0);
    CHECK(bins[1].mortality() == 0.0);
    CHECK(bins[2].mortality() == 1.0);
    CHECK(bins[0].count + bins[1].count + bins[2].count == t.decisions.size());
  }
}

TEST_CASE("dose distribution") {
  const auto c = synthetic_cohort(8, 12, 6);
  const auto rows = dose_distribution(replay_recommendations(c), kSettings);
  REQUIRE(rows.size() == 12 * 5);
  for (const auto& r : rows) {
    CHECK(r.clinician_mean == r.recommended_mean);
    CHECK(r.clinician_nonzero == r.recommended_nonzero);
    CHECK(r.patients == 8);
  }
  // Mean liquid at t = 3 against a direct average.
  double sum = 0.0;
  for (const auto& ep : c.episodes) sum += ep.steps[3].action.liquid;
  CHECK(rows[3 * 5 + 0].clinician_mean == doctest::Approx(sum / 8.0));

  cohort::Cohort zero = c;
  for (auto& ep : zero.episodes) {
    for (auto& s : ep.steps) s.action = {};
  }
  for (const auto& r : dose_distribution(replay_recommendations(zero), kSettings)) {
    CHECK(r.clinician_mean == 0.0);
    CHECK(r.clinician_nonzero == 0.0);
  }
}

TEST_CASE("agent-backed recommendations") {
  sim::SimWorld world{sim::SimParams{}};
  const auto c = world.generate_cohort(12, 3);
  const auto norm = cohort::Normalizer::fit(c);
  agent::Hyperparameters h;
  h.lstm_hidden = 8;
  h.mlp_hidden = 16;
  h.latent_dim = 3;
  const agent::Agent a(h);
  const SelectionSettings sel{.n_candidates = 4, .max_perturbation = 0.05, .seed = 9};
  const auto t1 = recommend_for_cohort(a, norm, c, sel);
  const auto t2 = recommend_for_cohort(a, norm, c, sel);
  REQUIRE(t1.decisions.size() == c.total_steps());
  CHECK(t1.episode_count == 12);
  for (std::size_t i = 0; i < t1.decisions.size(); ++i) {
    CHECK(t1.decisions[i].recommended == t2.decisions[i].recommended);
    CHECK(t1.decisions[i].q_clinician == t2.decisions[i].q_clinician);
    const auto& d = t1.decisions[i];
    CHECK(d.recommended.liquid <= 2000.0);
    CHECK((d.recommended.hydrocortisone == 0.0 || d.recommended.hydrocortisone == 1.0));
  }
  // The critic hook agrees with the table's logged-action values.
  const auto critic = agent_critic(a, norm);
  sim::PatientHistory hist;
  hist.observations.push_back(c.episodes[0].steps[0].obs);
  CHECK(critic(hist, c.episodes[0].steps[0].action) == doctest::Approx(t1.decisions[0].q_clinician).epsilon(1e-12));
}
