#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "saesens/aggregation.hpp"
#include "saesens/error.hpp"
#include "support/helpers.hpp"
#include "support/oracles.hpp"

using namespace saesens;

namespace {

SensitivityRecord rec(FeatureId f, double s) {
  SensitivityRecord r;
  r.feature_id = f;
  r.sensitivity = s;
  r.n_samples = 10;
  r.n_activating = static_cast<std::size_t>(std::lround(s * 10));
  return r;
}

FilterVerdict verdict(FeatureId f, bool enough, bool passed) {
  FilterVerdict v;
  v.feature_id = f;
  v.enough_examples = enough;
  v.passed = passed;
  return v;
}

// Frequency at the log-centre of bin b of n over [lo, hi].
double bin_centre(std::size_t b, std::size_t n, double lo, double hi) {
  const double t = (static_cast<double>(b) + 0.5) / static_cast<double>(n);
  return std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
}

}  // namespace

TEST_SUITE("aggregation") {
  TEST_CASE("spearman basic cases") {
    const std::vector<double> x = {1, 2, 3, 4};
    CHECK(spearman(x, std::vector<double>{2, 1, 4, 3}) == 0.6);
    CHECK(spearman(x, std::vector<double>{10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman(x, std::vector<double>{4, 3, 2, 1}) == doctest::Approx(-1.0));
  }

  TEST_CASE("spearman errors") {
    const std::vector<double> x = {1, 2, 3};
    CHECK_THROWS_AS(spearman(x, std::vector<double>{5, 5, 5}), UndefinedMetricError);
    CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), PreconditionError);
    CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2}), PreconditionError);
  }

  TEST_CASE("average ranks share tied positions") {
    const auto r = average_ranks(std::vector<double>{10, 20, 10, 30, 20, 20});
    const std::vector<double> expect = {1.5, 4, 1.5, 6, 4, 4};
    CHECK(r == expect);
    CHECK(r == oracle::ranks({10, 20, 10, 30, 20, 20}));
  }

  TEST_CASE("spearman with ties matches the closed form") {
    std::mt19937_64 gen(3);
    for (int i = 0; i < 200; ++i) {
      const std::size_t n = 3 + gen() % 30;
      std::vector<double> x(n), y(n);
      for (auto& v : x) v = static_cast<double>(gen() % 6);
      for (auto& v : y) v = static_cast<double>(gen() % 6);
      if (std::adjacent_find(x.begin(), x.end(), std::not_equal_to<>()) == x.end()) continue;
      if (std::adjacent_find(y.begin(), y.end(), std::not_equal_to<>()) == y.end()) continue;
      CHECK(std::abs(spearman(x, y) - oracle::spearman_closed_form(x, y)) <= 1e-12);
    }
  }

  TEST_CASE("spearman is invariant under increasing transforms") {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> u(0.1, 5.0);
    for (int i = 0; i < 50; ++i) {
      std::vector<double> x(12), y(12), tx(12);
      for (std::size_t k = 0; k < 12; ++k) {
        x[k] = u(gen);
        y[k] = u(gen);
        tx[k] = std::exp(3.0 * x[k]) + 7.0;
      }
      CHECK(spearman(tx, y) == doctest::Approx(spearman(x, y)).epsilon(1e-12));
    }
  }

  TEST_CASE("identical histograms give unit weights") {
    SaeFrequencies f;
    f["a"] = {{0, 0.001}, {1, 0.01}, {2, 0.1}};
    f["b"] = {{5, 0.001}, {6, 0.01}, {7, 0.1}};
    const auto w = build_frequency_weighting(f, 4);
    for (const auto& [sae, ws] : w.weights) {
      for (const auto& [id, v] : ws) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    }
  }

  TEST_CASE("weighted bin masses match the target") {
    const double lo = 1e-5, hi = 1e-1;
    const std::size_t n_bins = 20;
    SaeFrequencies f;
    std::map<std::string, std::map<FeatureId, std::size_t>> bin_of;
    std::mt19937_64 gen(12);
    for (const std::string sae : {"s1", "s2", "s3"}) {
      FeatureId id = 0;
      f[sae][id] = lo;
      bin_of[sae][id++] = 0;
      f[sae][id] = hi;
      bin_of[sae][id++] = n_bins - 1;
      for (std::size_t b = 0; b < n_bins; ++b) {
        const std::size_t count = 1 + gen() % (sae == "s1" ? 3 : sae == "s2" ? 9 : 20);
        for (std::size_t k = 0; k < count; ++k) {
          f[sae][id] = bin_centre(b, n_bins, lo, hi);
          bin_of[sae][id++] = b;
        }
      }
    }
    const auto w = build_frequency_weighting(f, n_bins);

    // Target: average of each SAE's per-bin fraction, from the constructed bins.
    std::vector<double> target(n_bins, 0.0);
    for (const auto& [sae, bins] : bin_of) {
      for (const auto& [id, b] : bins) target[b] += 1.0 / static_cast<double>(bins.size()) / 3.0;
    }
    for (std::size_t b = 0; b < n_bins; ++b) CHECK(std::abs(w.target_distribution[b] - target[b]) <= 1e-12);

    for (const auto& [sae, bins] : bin_of) {
      std::vector<double> mass(n_bins, 0.0);
      double total = 0.0, sum = 0.0;
      for (const auto& [id, b] : bins) {
        const double wf = w.weights.at(sae).at(id);
        CHECK(wf > 0.0);
        mass[b] += wf;
        total += wf;
        sum += wf;
      }
      CHECK(sum / static_cast<double>(bins.size()) == doctest::Approx(1.0).epsilon(1e-12));
      for (std::size_t b = 0; b < n_bins; ++b) CHECK(std::abs(mass[b] / total - target[b]) <= 1e-9);
      CHECK(w.achieved_mass.at(sae) == doctest::Approx(1.0));
      CHECK(w.uncovered_bins.at(sae).empty());
    }
  }

  TEST_CASE("disjoint two-bin SAEs reach half the target mass") {
    SaeFrequencies f;
    f["A"] = {{0, 0.001}, {1, 0.001}, {2, 0.001}};
    f["B"] = {{0, 0.1}, {1, 0.1}};
    const auto w = build_frequency_weighting(f, 2);
    CHECK(w.target_distribution == std::vector<double>{0.5, 0.5});
    CHECK(w.achieved_mass.at("A") == 0.5);
    CHECK(w.achieved_mass.at("B") == 0.5);
    CHECK(w.uncovered_bins.at("A") == std::vector<std::size_t>{1});
    CHECK(w.uncovered_bins.at("B") == std::vector<std::size_t>{0});
    // Raw weight target/mass = 0.5 per feature; A's bin-1 features carry 0.5 of the total.
    CHECK(w.sae_mass.at("A") == std::vector<double>{1.0, 0.0});
  }

  TEST_CASE("weighting preconditions") {
    SaeFrequencies one;
    one["a"] = {{0, 0.1}, {1, 0.2}};
    CHECK_THROWS_AS(build_frequency_weighting(one), PreconditionError);
    SaeFrequencies flat;
    flat["a"] = {{0, 0.1}};
    flat["b"] = {{0, 0.1}};
    CHECK_THROWS_AS(build_frequency_weighting(flat), ConfigError);
    SaeFrequencies zero;
    zero["a"] = {{0, 0.0}, {1, 0.2}};
    zero["b"] = {{0, 0.1}};
    CHECK_THROWS_AS(build_frequency_weighting(zero), PreconditionError);
  }

  TEST_CASE("mean, weighted mean and histogram") {
    const std::vector<SensitivityRecord> rs = {rec(0, 0.8), rec(1, 1.0)};
    const std::vector<FilterVerdict> vs = {verdict(0, true, true), verdict(1, true, true)};
    AggregateInputs in{rs, vs};
    auto r = aggregate_sae({"x", 16, "l0"}, in);
    CHECK(*r.mean_sensitivity == doctest::Approx(0.9));
    CHECK_FALSE(r.weighted_mean_sensitivity);
    CHECK(r.histogram[8] == 1);
    CHECK(r.histogram[9] == 1);

    const std::vector<SensitivityRecord> rs2 = {rec(0, 0.5), rec(1, 1.0)};
    const std::map<FeatureId, double> w = {{0, 2.0}, {1, 0.0}};
    AggregateInputs in2{rs2, vs};
    in2.weights = &w;
    CHECK(*aggregate_sae({"x", 16, "l0"}, in2).weighted_mean_sensitivity == 0.5);
  }

  TEST_CASE("all-ones weights leave the mean unchanged exactly") {
    std::mt19937_64 gen(9);
    std::vector<SensitivityRecord> rs;
    std::vector<FilterVerdict> vs;
    std::map<FeatureId, double> ones;
    for (FeatureId f = 0; f < 137; ++f) {
      rs.push_back(rec(f, static_cast<double>(gen() % 12) / 11.0));
      vs.push_back(verdict(f, true, true));
      ones[f] = 1.0;
    }
    AggregateInputs in{rs, vs};
    in.weights = &ones;
    const auto r = aggregate_sae({"x", 200, ""}, in);
    CHECK(*r.weighted_mean_sensitivity == *r.mean_sensitivity);
  }

  TEST_CASE("filter statistics partition the sampled features") {
    const std::vector<FilterVerdict> vs = {verdict(0, true, true), verdict(1, false, false),
                                           verdict(2, true, false), verdict(3, false, false),
                                           verdict(4, true, true)};
    const std::vector<SensitivityRecord> rs = {rec(0, 1.0), rec(1, 0.0), rec(4, 0.5)};
    AggregateInputs in{rs, vs};
    in.unevaluated = {{7, "transport"}};
    const auto r = aggregate_sae({"x", 16, ""}, in);
    CHECK(r.n_features_sampled == 5);
    CHECK(r.n_passed_filter == 2);
    CHECK(r.n_excluded_count == 2);
    CHECK(r.n_excluded_truncation == 1);
    CHECK(r.n_passed_filter + r.n_excluded_count + r.n_excluded_truncation == r.n_features_sampled);
    CHECK(r.n_scored == 2);  // feature 1 failed the filter, so its record is ignored
    CHECK(*r.mean_sensitivity == doctest::Approx(0.75));
    CHECK(r.unevaluated.size() == 1);
    const auto j = to_json(r);
    CHECK(j.at("filter_statistics").at("excluded_by_truncation") == 1);
  }

  TEST_CASE("correlations against metrics") {
    std::vector<SensitivityRecord> rs;
    std::vector<FilterVerdict> vs;
    FeatureMetrics m;
    for (FeatureId f = 0; f < 6; ++f) {
      rs.push_back(rec(f, 0.1 * static_cast<double>(f)));
      vs.push_back(verdict(f, true, true));
      m.frequency[f] = 1.0 / (1.0 + static_cast<double>(f));
      m.max_cosine[f] = 0.5;
    }
    m.interp = {{0, 0.9}, {1, 0.8}};
    AggregateInputs in{rs, vs};
    in.metrics = &m;
    const auto r = aggregate_sae({"x", 6, ""}, in);
    REQUIRE(r.correlation("frequency"));
    CHECK(*r.correlation("frequency")->rho == doctest::Approx(-1.0));
    CHECK(r.correlation("frequency")->n == 6);
    CHECK_FALSE(r.correlation("max_decoder_cosine")->rho);
    CHECK_FALSE(r.correlation("max_decoder_cosine")->note.empty());
    CHECK_FALSE(r.correlation("interp")->rho);
    CHECK(r.correlation("interp")->n == 2);
  }

  TEST_CASE("no scored features leaves the mean absent") {
    const std::vector<FilterVerdict> vs = {verdict(0, false, false)};
    AggregateInputs in{{}, vs};
    const auto r = aggregate_sae({"x", 1, ""}, in);
    CHECK_FALSE(r.mean_sensitivity);
    CHECK(summary_csv(std::vector<SaeReport>{r}) ==
          "sae_id,width,l0,n_sampled,n_passed,mean_sensitivity,weighted_mean_sensitivity,rho_frequency,rho_cosine,"
          "rho_interp\nx,1,,1,0,,,,,\n");
  }

  TEST_CASE("interp threshold slice") {
    const std::vector<SensitivityRecord> rs = {rec(3, 0.4), rec(1, 0.5), rec(2, 0.9), rec(4, 0.1)};
    const std::map<FeatureId, double> interp = {{1, 0.95}, {2, 0.99}, {3, 0.9}, {4, 0.2}};
    CHECK(interp_threshold_slice(rs, interp, 0.9, 0.5) == std::vector<FeatureId>{1, 3});
    CHECK(interp_threshold_slice(rs, interp, 0.9, 1.0) == std::vector<FeatureId>{1, 2, 3});
    CHECK(interp_threshold_slice(rs, {}, 0.9, 0.5).empty());
  }

  TEST_CASE("interp score files") {
    testing::TempDir dir("interp");
    {
      std::ofstream(dir / "a.csv") << "feature,score\n1,0.5\n2\t0.75\n\n3 1\n";
    }
    const auto s = read_interp_scores(dir / "a.csv");
    CHECK(s.size() == 3);
    CHECK(s.at(2) == 0.75);
    {
      std::ofstream(dir / "b.csv") << "1,1.5\n";
    }
    CHECK_THROWS_AS(read_interp_scores(dir / "b.csv"), ValidationError);
    {
      std::ofstream(dir / "c.csv") << "1,0.5\nnope,0.2\n";
    }
    CHECK_THROWS_AS(read_interp_scores(dir / "c.csv"), FormatError);
  }

  TEST_CASE("summary table formatting") {
    SaeReport r;
    r.info = {"lex-a", 20, "32"};
    r.n_features_sampled = 20;
    r.n_passed_filter = 16;
    r.mean_sensitivity = 0.8415584;
    r.correlations.push_back({"frequency", -0.25, 15, ""});
    const std::vector<SaeReport> rows = {r};
    const auto csv = summary_csv(rows);
    CHECK(csv.substr(csv.find('\n') + 1) == "lex-a,20,32,20,16,0.841558,,-0.250000,,\n");
    const auto j = summary_json(rows);
    CHECK(j.at("rows")[0].at("rho_frequency") == -0.25);
    CHECK(j.at("rows")[0].at("rho_interp").is_null());
  }
}
