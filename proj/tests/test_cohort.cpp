#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "batchrx/buffer.hpp"
#include "batchrx/cohort.hpp"

using namespace batchrx;
using namespace batchrx::cohort;

namespace {

Observation make_obs(double sofa, double lactate, double fill = 1.0) {
  Observation o;
  o.fill(fill);
  o[kGcs] = 15.0;
  o[kSofa] = sofa;
  o[kLactate] = lactate;
  return o;
}

Episode make_episode(const std::string& id, std::size_t length, bool survived, double base = 0.0) {
  Episode ep;
  ep.patient_id = id;
  ep.survived = survived;
  for (std::size_t t = 0; t < length; ++t) {
    Step s;
    s.obs = make_obs(4.0 + static_cast<double>(t) * 0.5, 2.0 + 0.1 * static_cast<double>(t), base + static_cast<double>(t));
    s.action = {100.0 * static_cast<double>(t), 0.1, 0.0, 0.0, t % 2 == 0 ? 1.0 : 0.0};
    ep.steps.push_back(s);
  }
  label_rewards(ep);
  return ep;
}

std::string to_csv(const Cohort& c) {
  std::ostringstream out;
  write_cohort(out, c);
  return out.str();
}

std::vector<std::vector<std::string>> split_rows(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string join_rows(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + r[i];
    out += "\n";
  }
  return out;
}

std::size_t column(const std::string& name) {
  const auto cols = csv_columns();
  return static_cast<std::size_t>(std::find(cols.begin(), cols.end(), name) - cols.begin());
}

LoadResult parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_cohort(in);
}

}  // namespace

TEST_CASE("reward function") {
  SUBCASE("SOFA 10 to 8 with lactate 3 to 2") {
    const double expected = -0.1 * 10.0 + (-1.0) * (8.0 - 10.0) + (-2.0) * std::tanh(2.0 - 3.0);
    const double r = compute_reward(make_obs(10, 3.0), make_obs(8, 2.0));
    CHECK(std::abs(r - expected) <= 1e-12);
    CHECK(r == doctest::Approx(2.5231883).epsilon(1e-7));
  }
  SUBCASE("no change at SOFA 0 is zero") { CHECK(compute_reward(make_obs(0, 1.5), make_obs(0, 1.5)) == 0.0); }
  SUBCASE("SOFA 5 unchanged leaves only the first term") {
    CHECK(std::abs(compute_reward(make_obs(5, 2.0), make_obs(5, 2.0)) - (-0.5)) <= 1e-12);
  }
  SUBCASE("each constant enters linearly") {
    const RewardConstants k{.c0 = -0.3, .c1 = 0.7, .c2 = 1.9};
    const double expected = -0.3 * 6.0 + 0.7 * (9.0 - 6.0) + 1.9 * std::tanh(0.4);
    CHECK(std::abs(compute_reward(make_obs(6, 1.0), make_obs(9, 1.4), k) - expected) <= 1e-12);
  }
  SUBCASE("terminal rewards") {
    CHECK(terminal_reward(true) == 25.0);
    CHECK(terminal_reward(false) == -25.0);
  }
  SUBCASE("episode labeling uses adjacent observations and the survival flag") {
    const Episode ep = make_episode("A", 5, false);
    for (std::size_t t = 0; t + 1 < ep.length(); ++t) {
      CHECK(ep.steps[t].reward == compute_reward(ep.steps[t].obs, ep.steps[t + 1].obs));
    }
    CHECK(ep.steps.back().reward == -25.0);
  }
}

TEST_CASE("cohort CSV") {
  Cohort c;
  c.episodes.push_back(make_episode("P1", 3, true));
  c.episodes.push_back(make_episode("P2", 12, false, 7.25));
  const std::string csv = to_csv(c);

  SUBCASE("well-formed file round-trips") {
    const auto r = parse_text(csv);
    REQUIRE(r.ok());
    REQUIRE(r.cohort.episodes.size() == 2);
    CHECK(r.cohort.episodes[0].length() == 3);
    CHECK(r.cohort.episodes[1].length() == 12);
    CHECK(r.cohort.episodes[0].survived);
    CHECK_FALSE(r.cohort.episodes[1].survived);
    for (std::size_t e = 0; e < 2; ++e) {
      for (std::size_t t = 0; t < c.episodes[e].length(); ++t) {
        CHECK(r.cohort.episodes[e].steps[t].obs == c.episodes[e].steps[t].obs);
        CHECK(r.cohort.episodes[e].steps[t].action == c.episodes[e].steps[t].action);
        CHECK(r.cohort.episodes[e].steps[t].reward == c.episodes[e].steps[t].reward);
      }
    }
    CHECK(to_csv(r.cohort) == csv);
  }
  SUBCASE("negative vaso1 is rejected with row and column") {
    auto rows = split_rows(csv);
    rows[2][column("act_vaso1")] = "-0.5";
    const auto r = parse_text(join_rows(rows));
    REQUIRE_FALSE(r.ok());
    CHECK(r.cohort.empty());
    CHECK(r.errors.front().line == 3);
    CHECK(r.errors.front().column == "act_vaso1");
  }
  SUBCASE("missing column") {
    auto rows = split_rows(csv);
    for (auto& row : rows) row.erase(row.begin() + static_cast<std::ptrdiff_t>(column("sofa")));
    const auto r = parse_text(join_rows(rows));
    REQUIRE_FALSE(r.ok());
    CHECK(r.errors.front().column == "sofa");
    CHECK(r.errors.front().message == "missing column");
  }
  SUBCASE("non-monotone timesteps") {
    auto rows = split_rows(csv);
    std::swap(rows[1][column("t")], rows[2][column("t")]);
    const auto r = parse_text(join_rows(rows));
    REQUIRE_FALSE(r.ok());
    CHECK(r.errors.front().column == "t");
  }
  SUBCASE("more than twelve steps") {
    auto rows = split_rows(csv);
    auto extra = rows.back();
    rows.push_back(extra);
    const auto r = parse_text(join_rows(rows));
    CHECK_FALSE(r.ok());
  }
  SUBCASE("missing cells are forward-filled then median-filled") {
    auto rows = split_rows(csv);
    rows[2][column("heart_rate")] = "";  // P1 t=1: forward fill from t=0
    rows[1][column("albumin")] = "NA";   // P1 t=0: nothing earlier, median fill
    const auto r = parse_text(join_rows(rows));
    REQUIRE(r.ok());
    CHECK(r.imputed_cells == 2);
    const auto& p1 = r.cohort.episodes[0];
    CHECK(p1.steps[1].obs[kHeartRate] == p1.steps[0].obs[kHeartRate]);
    CHECK(p1.steps[1].imputed.test(kHeartRate));
    std::vector<double> seen;
    for (const auto& ep : c.episodes) {
      for (std::size_t t = 0; t < ep.length(); ++t) {
        if (!(ep.patient_id == "P1" && t == 0)) seen.push_back(ep.steps[t].obs[kAlbumin]);
      }
    }
    std::sort(seen.begin(), seen.end());
    const double median = seen.size() % 2 ? seen[seen.size() / 2]
                                          : 0.5 * (seen[seen.size() / 2 - 1] + seen[seen.size() / 2]);
    CHECK(p1.steps[0].obs[kAlbumin] == median);
  }
  SUBCASE("empty file gives an empty cohort and a warning") {
    const auto r = parse_text("");
    CHECK(r.ok());
    CHECK(r.cohort.empty());
    CHECK_FALSE(r.warnings.empty());
  }
  SUBCASE("a truncated history needs prefix mode") {
    auto rows = split_rows(csv);
    rows.resize(3);  // header plus P1 t = 0, 1 with done = 0 on the last row
    const std::string text = join_rows(rows);
    const auto strict = parse_text(text);
    REQUIRE_FALSE(strict.ok());
    CHECK(strict.errors.front().column == "done");
    std::istringstream in(text);
    const auto prefix = parse_cohort(in, {}, {}, EpisodeMode::prefix);
    REQUIRE(prefix.ok());
    CHECK(prefix.cohort.episodes.front().length() == 2);
    // done = 1 before the last row is still an error.
    rows[1][column("done")] = "1";
    std::istringstream early(join_rows(rows));
    CHECK_FALSE(parse_cohort(early, {}, {}, EpisodeMode::prefix).ok());
  }
  SUBCASE("over-cap doses are accepted with a warning") {
    auto rows = split_rows(csv);
    rows[1][column("act_liquid")] = "5000";
    const auto r = parse_text(join_rows(rows));
    CHECK(r.ok());
    CHECK_FALSE(r.warnings.empty());
  }
}

TEST_CASE("format_double round-trips") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 12345.678, 0.0}) CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("normalizer") {
  Cohort c;
  c.episodes.push_back(make_episode("A", 4, true));
  c.episodes.push_back(make_episode("B", 6, false, 3.0));
  const Normalizer n = Normalizer::fit(c);

  SUBCASE("use before fit is rejected") {
    Normalizer blank;
    CHECK_THROWS(blank.normalize(make_obs(1, 1)));
  }
  SUBCASE("features are z-scored with population statistics") {
    double sum = 0.0, ss = 0.0, count = 0.0;
    for (const auto& ep : c.episodes) {
      for (const auto& s : ep.steps) {
        sum += s.obs[kHeartRate];
        count += 1.0;
      }
    }
    const double mean = sum / count;
    for (const auto& ep : c.episodes) {
      for (const auto& s : ep.steps) ss += (s.obs[kHeartRate] - mean) * (s.obs[kHeartRate] - mean);
    }
    const Observation z = n.normalize(c.episodes[1].steps[2].obs);
    CHECK(z[kHeartRate] == doctest::Approx((c.episodes[1].steps[2].obs[kHeartRate] - mean) / std::sqrt(ss / count)));
    CHECK(n.stds()[kGcs] == 1.0);  // constant feature
  }
  SUBCASE("dose map endpoints and inverse") {
    const DoseCaps caps;
    const auto zero = n.normalize(DoseAction{});
    for (double v : zero) CHECK(v == -1.0);
    const auto full = n.normalize(DoseAction{caps.liquid, caps.vaso1, caps.vaso2, caps.vaso3, 1.0});
    for (double v : full) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    const DoseAction a{250.0, 0.3, 0.04, 0.01, 1.0};
    const auto z = n.normalize(a);
    CHECK(z[1] == doctest::Approx(2.0 * std::log1p(0.3) / std::log1p(caps.vaso1) - 1.0).epsilon(1e-15));
    const DoseAction back = n.denormalize(std::span<const double, kActionCount>(z));
    const auto x = a.to_array(), y = back.to_array();
    for (std::size_t i = 0; i < kActionCount; ++i) CHECK(std::abs(x[i] - y[i]) <= 1e-9);
  }
  SUBCASE("denormalize clamps to the caps") {
    const std::array<double, kActionCount> z{1.5, -3.0, 2.0, 0.0, -0.2};
    const DoseAction a = n.denormalize(z);
    CHECK(a.liquid == 2000.0);
    CHECK(a.vaso1 == 0.0);
    CHECK(a.vaso2 == 0.2);
    CHECK(a.hydrocortisone == 0.0);
  }
  SUBCASE("JSON round trip") {
    const Normalizer m = Normalizer::from_json(n.to_json());
    const Observation o = c.episodes[0].steps[1].obs;
    CHECK(m.normalize(o) == n.normalize(o));
    CHECK(m.caps() == n.caps());
  }
}

TEST_CASE("records buffer") {
  Cohort c;
  c.episodes.push_back(make_episode("A", 3, true));
  c.episodes.push_back(make_episode("B", 2, false, 5.0));
  const Normalizer n = Normalizer::fit(c);
  const RecordsBuffer buffer(c, n);
  REQUIRE(buffer.size() == 5);

  SUBCASE("transitions carry prefixes, the no-op first action and done flags") {
    const auto first = buffer.transition(0);
    CHECK(first.prefix_length == 1);
    CHECK(first.sequence.size() == 2);
    const auto noop = no_op_action(n);
    for (std::size_t k = 0; k < kActionCount; ++k) CHECK(first.sequence[0][kFeatureCount + k] == noop[k]);
    CHECK(first.action == n.normalize(c.episodes[0].steps[0].action));
    CHECK(first.reward == c.episodes[0].steps[0].reward);
    CHECK_FALSE(first.done);
    const auto last = buffer.transition(2);
    CHECK(last.done);
    CHECK(last.prefix_length == 3);
    CHECK(last.reward == 25.0);
    // The extension pair holds o_{t+1} and a_t.
    const auto second = buffer.transition(1);
    REQUIRE(second.sequence.size() == 3);
    const auto z = n.normalize(c.episodes[0].steps[2].obs);
    const auto a = n.normalize(c.episodes[0].steps[1].action);
    const auto& ext = second.sequence[second.prefix_length];
    CHECK(std::equal(z.begin(), z.end(), ext.begin()));
    CHECK(std::equal(a.begin(), a.end(), ext.begin() + kFeatureCount));
  }
  SUBCASE("single-transition buffer repeats it") {
    Cohort one;
    one.episodes.push_back(make_episode("S", 1, true));
    const RecordsBuffer b(one, Normalizer::fit(one));
    Rng rng(1);
    const auto batch = b.sample_minibatch(4, rng);
    REQUIRE(batch.size() == 4);
    for (const auto& s : batch) CHECK(s.episode == 0);
  }
  SUBCASE("seeded sampling is reproducible") {
    Rng a(9), b(9);
    const auto x = buffer.sample_minibatch(16, a);
    const auto y = buffer.sample_minibatch(16, b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].episode == y[i].episode);
      CHECK(x[i].t == y[i].t);
    }
  }
  SUBCASE("frequencies over 1e5 draws are uniform within 3 sigma") {
    Rng rng(2024);
    std::map<std::pair<std::size_t, std::size_t>, double> counts;
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws / 100; ++i) {
      for (const auto& s : buffer.sample_minibatch(100, rng)) counts[{s.episode, s.t}] += 1.0;
    }
    const double p = 1.0 / static_cast<double>(buffer.size());
    const double expected = p * draws;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    CHECK(counts.size() == buffer.size());
    for (const auto& [key, count] : counts) CHECK(std::abs(count - expected) <= 3.0 * sigma);
  }
}

TEST_CASE("patient-level splits") {
  Cohort c;
  for (int i = 0; i < 20; ++i) c.episodes.push_back(make_episode("P" + std::to_string(i), 2, i % 3 != 0));
  const auto split = split_by_patient(c, 0.8, 5);
  CHECK(split.train.episodes.size() == 16);
  CHECK(split.test.episodes.size() == 4);
  for (const auto& t : split.test.episodes) {
    for (const auto& r : split.train.episodes) CHECK(t.patient_id != r.patient_id);
  }
  const auto folds = kfold_by_patient(c, 5, 5);
  REQUIRE(folds.size() == 5);
  std::map<std::string, int> tested;
  for (const auto& f : folds) {
    CHECK(f.train.episodes.size() + f.test.episodes.size() == 20);
    for (const auto& e : f.test.episodes) ++tested[e.patient_id];
  }
  CHECK(tested.size() == 20);
  for (const auto& [id, n] : tested) CHECK(n == 1);
}
