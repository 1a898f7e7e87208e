// Acceptance checks, one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include <spdlog/spdlog.h>

#include "saesens/aggregation.hpp"
#include "saesens/backend.hpp"
#include "saesens/examples.hpp"
#include "saesens/fixture.hpp"
#include "saesens/generation.hpp"
#include "saesens/io.hpp"
#include "saesens/pipeline.hpp"
#include "saesens/sae.hpp"
#include "saesens/scoring.hpp"
#include "saesens/text_analysis.hpp"
#include "support/helpers.hpp"
#include "support/lagged_backend.hpp"
#include "support/oracles.hpp"

using namespace saesens;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- 1. synthetic end-to-end oracle -------------------------------------

// The scripted reply a feature is judged on: the non-error reply with the
// most samples. Samples are split on the separator, quotes and markers are
// dropped, and words are compared against the detector word.
std::vector<std::string> oracle_samples(const nlohmann::json& replies) {
  std::vector<std::string> best;
  for (const auto& r : replies) {
    if (!r.is_string()) continue;
    const std::string text = r.get<std::string>();
    std::vector<std::string> samples;
    std::size_t start = 0;
    for (;;) {
      const auto end = text.find("<SAMPLE_SEPARATOR/>", start);
      std::string seg = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
      std::string clean;
      for (std::size_t i = 0; i < seg.size(); ++i) {
        if ((seg.compare(i, 2, "{{") == 0) || (seg.compare(i, 2, "}}") == 0)) {
          ++i;
          continue;
        }
        clean.push_back(seg[i] == '"' ? ' ' : seg[i]);
      }
      std::istringstream words(clean);
      std::string w;
      if (words >> w) samples.push_back(clean);
      if (end == std::string::npos) break;
      start = end + std::string_view("<SAMPLE_SEPARATOR/>").size();
    }
    if (samples.size() > best.size()) best = samples;
  }
  return best;
}

Outcome check_end_to_end() {
  testing::TempDir dir("acc-e2e");
  const auto t0 = std::chrono::steady_clock::now();
  const auto info = write_fixture(dir.path());
  PipelineContext ctx(RunConfig::load(info.config));
  run_collect(ctx);
  run_generate(ctx);
  run_score(ctx);
  run_analyze(ctx);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto replies = nlohmann::json::parse(read_file(info.responses)).at("responses");
  const auto vocab = WhitespaceTokenizer::from_file(info.vocab);
  std::size_t features = 0, mismatches = 0, detectors = 0;
  for (const auto& sae : info.saes) {
    detectors += sae.detectors.size();
    const auto d = ctx.sae_dir(sae.id);
    std::size_t passed = 0;
    for (const auto& v : read_verdicts(d / "verdicts.jsonl")) passed += v.passed ? 1 : 0;
    const auto records = read_sensitivity(d / "sensitivity.jsonl");
    const auto unevaluated = read_unevaluated(d / "unevaluated.jsonl");
    if (records.size() + unevaluated.size() != passed) ++mismatches;
    for (const auto& r : records) {
      const std::string word = vocab.token(sae.detectors.at(r.feature_id));
      const auto samples = oracle_samples(replies.at(std::to_string(r.feature_id)));
      std::size_t hits = 0;
      for (const auto& s : samples) hits += oracle::contains_word(s, word) ? 1 : 0;
      const double expect = static_cast<double>(hits) / static_cast<double>(samples.size());
      if (r.sensitivity != expect || r.n_samples != samples.size()) ++mismatches;
      ++features;
    }
  }
  return {mismatches == 0 && features > 0 && detectors == 40 && secs < 60.0,
          fmt("%zu scored features across %zu SAEs of 20 detectors, %zu mismatches, %.2f s", features,
              info.saes.size(), mismatches, secs)};
}

// --- 2. encoder equivalence ----------------------------------------------

Outcome check_encoder() {
  std::mt19937_64 gen(2024);
  const SaeVariant variants[] = {SaeVariant::relu,  SaeVariant::jumprelu, SaeVariant::topk,
                                 SaeVariant::batchtopk, SaeVariant::gated, SaeVariant::p_anneal,
                                 SaeVariant::matryoshka_topk};
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  double worst = 0.0;
  std::size_t pairs = 0;
  for (int i = 0; i < 1000; ++i) {
    const SaeVariant v = variants[i % 7];
    const std::size_t width = 1 + gen() % 48, d = 1 + gen() % 32, t = 1 + gen() % 6;
    const auto m = testing::random_sae(v, width, d, gen);
    Matrix x(t, d);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t c = 0; c < d; ++c) x(r, c) = u(gen) * 2.0f;
    }
    const Matrix got = encode(m, x);
    const auto want = oracle::encode(m, x);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t f = 0; f < width; ++f) worst = std::max(worst, std::abs(got(r, f) - want[r][f]));
    }
    ++pairs;
  }
  return {worst <= 1e-5, fmt("%zu (model, input) pairs over 7 variants, max |dev| = %.3g", pairs, worst)};
}

// --- 3. filtering ---------------------------------------------------------

// Pair-detector features under a lag-12 backend. A sequence "recovers" when
// a second complete pair sits inside the 21-token window around the first,
// so the truncated window still fires. Feature i has n_i activating
// sequences of which k_i recover; its truncation rate is exactly k_i / n_i.
Outcome check_filtering() {
  struct Plan {
    std::size_t n, k;
  };
  const std::vector<Plan> plans = {{40, 40}, {40, 0}, {15, 14}, {15, 13}, {15, 15}, {14, 14},
                                   {10, 0},  {20, 20}, {15, 12}, {15, 9},  {16, 16}, {12, 11}};
  testing::LaggedBackend backend(256, 12);
  std::vector<std::pair<TokenId, TokenId>> pairs;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    pairs.push_back({static_cast<TokenId>(2 * i + 1), static_cast<TokenId>(2 * i + 2)});
  }
  const auto sae = testing::pair_detector_sae(backend, pairs);
  std::vector<std::vector<TokenId>> seqs;
  std::mt19937_64 gen(31);
  for (std::size_t i = 0; i < plans.size(); ++i) {
    for (std::size_t s = 0; s < plans[i].n; ++s) {
      std::vector<TokenId> q(40);
      for (auto& t : q) t = 100 + static_cast<TokenId>(gen() % 50);
      const auto [a, b] = pairs[i];
      q[14] = b;
      q[26] = a;
      if (s < plans[i].k) {
        q[18] = b;
        q[30] = a;
      }
      seqs.push_back(q);
    }
  }
  for (std::size_t s = 0; s < 30; ++s) {  // sequences where nothing fires
    std::vector<TokenId> q(40);
    for (auto& t : q) t = 100 + static_cast<TokenId>(gen() % 50);
    seqs.push_back(q);
  }
  const auto sample = testing::sample_from(seqs, "lagged");
  std::vector<FeatureId> ids(plans.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<FeatureId>(i);
  const auto scans = scan_sample(sae, backend, sample, ids);

  std::size_t agree = 0, total = 0;
  std::vector<std::size_t> pass_counts;
  std::string counts;
  for (double cut : {0.8, 0.9, 0.95}) {
    std::size_t passed = 0;
    for (std::size_t i = 0; i < plans.size(); ++i) {
      const auto set = select_examples(scans[i], 5);
      const double rate = truncation_activation_rate(sae, backend, set);
      const auto v = filter_feature(ids[i], set.occurrence_count, rate, {15, cut});
      const bool truth = plans[i].n >= 15 && static_cast<double>(plans[i].k) / static_cast<double>(plans[i].n) >= cut;
      // At most 15 examples are shown, so a mixed plan only has a known rate when n <= 15.
      const bool mixed = plans[i].k != 0 && plans[i].k != plans[i].n;
      const double want = static_cast<double>(plans[i].k) / static_cast<double>(plans[i].n);
      const bool exact = set.occurrence_count == plans[i].n && (mixed && plans[i].n > 15 ? true : rate == want);
      agree += (v.passed == truth && exact) ? 1 : 0;
      ++total;
      passed += v.passed ? 1 : 0;
    }
    pass_counts.push_back(passed);
    counts += fmt("%s%.2f:%zu", counts.empty() ? "" : " ", cut, passed);
  }
  const bool monotone = pass_counts[0] >= pass_counts[1] && pass_counts[1] >= pass_counts[2];
  const bool strict = pass_counts[0] > pass_counts[2];
  return {agree == total && monotone && strict,
          fmt("verdict agreement %zu/%zu; passes by cutoff %s", agree, total, counts.c_str())};
}

// --- 4. LCS ---------------------------------------------------------------

Outcome check_lcs() {
  std::mt19937_64 gen(77);
  std::size_t plain_bad = 0, anchored_bad = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const TokenId alphabet = 2 + static_cast<TokenId>(gen() % 12);
    auto draw = [&] {
      std::vector<TokenId> v(1 + gen() % 150);
      for (auto& t : v) t = static_cast<TokenId>(gen() % alphabet);
      return v;
    };
    const auto a = draw();
    const auto b = draw();
    if (lcs_tokens(a, b) != oracle::lcs(a, b)) ++plain_bad;
    std::vector<float> acts(a.size(), 0.0f);
    acts[gen() % a.size()] = 1.0f;
    if (gen() % 2) acts[gen() % a.size()] = 2.0f;
    auto ex = testing::make_example(std::vector<std::string>(a.size(), "x"), acts);
    ex.tokens = a;
    if (lcs_ending_on_activation(ex, b) != oracle::lcs(a, b, ex.last_marked_token())) ++anchored_bad;
  }
  return {plain_bad == 0 && anchored_bad == 0,
          fmt("%d pairs (lengths 1-150): %zu plain and %zu anchored disagreements", n, plain_bad, anchored_bad)};
}

// --- 5. Spearman ----------------------------------------------------------

Outcome check_spearman() {
  std::mt19937_64 gen(5);
  double worst = 0.0;
  int vectors = 0;
  while (vectors < 100) {
    const std::size_t n = 3 + gen() % 60;
    const int range = 2 + static_cast<int>(gen() % 15);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = static_cast<double>(static_cast<int>(gen() % range) - range / 2);
    for (auto& v : y) v = static_cast<double>(static_cast<int>(gen() % range) - range / 2);
    auto constant = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
    };
    if (constant(x) || constant(y)) continue;
    worst = std::max(worst, std::abs(spearman(x, y) - oracle::spearman_closed_form(x, y)));
    ++vectors;
  }
  const double hand = spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{2, 1, 4, 3});
  return {worst <= 1e-12 && hand == 0.6,
          fmt("%d tied integer vectors, max |dev| = %.3g; [1,2,3,4]~[2,1,4,3] = %.15g", vectors, worst, hand)};
}

// --- 6. frequency weighting ----------------------------------------------

Outcome check_weighting() {
  const std::size_t n_bins = 20;
  const double lo = 1e-6, hi = 0.2;
  auto centre = [&](std::size_t b) {
    const double t = (static_cast<double>(b) + 0.5) / static_cast<double>(n_bins);
    return std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
  };
  // Distinct shapes: flat, rising, falling (all bins occupied).
  SaeFrequencies freqs;
  std::map<std::string, std::map<FeatureId, std::size_t>> bins;
  for (const std::string sae : {"flat", "rising", "falling"}) {
    FeatureId id = 0;
    freqs[sae][id] = lo;
    bins[sae][id++] = 0;
    freqs[sae][id] = hi;
    bins[sae][id++] = n_bins - 1;
    for (std::size_t b = 0; b < n_bins; ++b) {
      const std::size_t count = sae == "flat" ? 5 : sae == "rising" ? 1 + b : n_bins - b;
      for (std::size_t k = 0; k < count; ++k) {
        freqs[sae][id] = centre(b);
        bins[sae][id++] = b;
      }
    }
  }
  const auto w = build_frequency_weighting(freqs, n_bins);
  std::vector<double> target(n_bins, 0.0);
  for (const auto& [sae, m] : bins) {
    for (const auto& [id, b] : m) target[b] += 1.0 / static_cast<double>(m.size()) / 3.0;
  }
  double worst = 0.0;
  for (const auto& [sae, m] : bins) {
    std::vector<double> mass(n_bins, 0.0);
    double total = 0.0;
    for (const auto& [id, b] : m) {
      mass[b] += w.weights.at(sae).at(id);
      total += w.weights.at(sae).at(id);
    }
    for (std::size_t b = 0; b < n_bins; ++b) worst = std::max(worst, std::abs(mass[b] / total - target[b]));
  }

  // Degenerate case: identical histograms give unit weights and an unchanged mean.
  SaeFrequencies same;
  std::vector<SensitivityRecord> records;
  std::vector<FilterVerdict> verdicts;
  std::mt19937_64 gen(6);
  for (FeatureId f = 0; f < 60; ++f) {
    const double fr = centre(f % n_bins);
    same["a"][f] = fr;
    same["b"][f + 1000] = fr;
    SensitivityRecord r;
    r.feature_id = f;
    r.n_samples = 11;
    r.n_activating = gen() % 12;
    r.sensitivity = static_cast<double>(r.n_activating) / 11.0;
    records.push_back(r);
    FilterVerdict v;
    v.feature_id = f;
    v.enough_examples = v.passed = true;
    verdicts.push_back(v);
  }
  const auto ws = build_frequency_weighting(same, n_bins);
  bool ones = true;
  for (const auto& [sae, m] : ws.weights) {
    for (const auto& [id, v] : m) ones &= v == 1.0;
  }
  AggregateInputs in{records, verdicts};
  in.weights = &ws.weights.at("a");
  const auto rep = aggregate_sae({"a", 60, ""}, in);
  const bool unchanged = rep.weighted_mean_sensitivity && *rep.weighted_mean_sensitivity == *rep.mean_sensitivity;
  return {worst <= 1e-9 && ones && unchanged,
          fmt("3 SAEs, max |weighted mass - target| = %.3g; identical histograms: unit weights %s, mean %s", worst,
              ones ? "yes" : "no", unchanged ? "unchanged" : "changed")};
}

// --- 7. prompt golden file and transcript parse -------------------------

Outcome check_prompt() {
  const auto set =
      example_set_from_json(nlohmann::json::parse(read_file(testing::data_dir() / "prompt_fixture.examples.json")));
  const auto p = build_prompt(set);
  const bool sys = p.system_text == read_file(testing::data_dir() / "prompt_fixture.system.txt");
  const bool user = p.user_text == read_file(testing::data_dir() / "prompt_fixture.user.txt");
  const auto samples = parse_samples(read_file(testing::data_dir() / "sample_transcript.txt"));
  bool spans = samples.size() >= 3;
  const std::size_t expected_spans[] = {3, 1, 1};
  for (std::size_t i = 0; spans && i < 3; ++i) {
    spans &= samples[i].target_spans.size() == expected_spans[i];
    for (const auto& sp : samples[i].target_spans) {
      spans &= samples[i].clean_text.substr(sp.start, sp.end - sp.start) == " resource";
    }
  }
  return {sys && user && spans, fmt("system %s, user %s; transcript -> %zu samples, spans %s",
                                    sys ? "identical" : "DIFFERS", user ? "identical" : "DIFFERS", samples.size(),
                                    spans ? "correct" : "WRONG")};
}

// --- 8. determinism -------------------------------------------------------

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const auto rel = fs::relative(e.path(), root);
    if (!e.is_regular_file() || std::find(rel.begin(), rel.end(), "logs") != rel.end()) continue;
    out[rel.string()] = sha256_file(e.path());
  }
  return out;
}

Outcome check_determinism() {
  testing::TempDir dir("acc-det");
  std::vector<std::map<std::string, std::string>> trees;
  for (const char* name : {"one", "two"}) {
    const auto fx = dir / name;
    const std::string cmd = std::string(SAESENS_CLI) + " fixture " + fx.string() + " >/dev/null 2>&1 && " +
                            SAESENS_CLI + " run --config " + (fx / "config.json").string() + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || (WEXITSTATUS(status) != 0 && WEXITSTATUS(status) != 3)) {
      return {false, fmt("run %s exited with status %d", name, status)};
    }
    trees.push_back(tree(fx));
  }
  std::size_t differing = 0;
  std::string first_diff;
  for (const auto& [rel, h] : trees[0]) {
    auto it = trees[1].find(rel);
    if (it == trees[1].end() || it->second != h) {
      ++differing;
      first_diff = first_diff.empty() ? rel : first_diff;
    }
  }
  differing += trees[1].size() > trees[0].size() ? trees[1].size() - trees[0].size() : 0;
  return {differing == 0 && trees[0].size() > 10,
          fmt("%zu files compared (logs excluded), %zu differ%s%s", trees[0].size(), differing,
                  first_diff.empty() ? "" : ", first: ", first_diff.c_str())};
}

// --- 9. position invariance ----------------------------------------------

Outcome check_position_invariance() {
  std::vector<std::string> words = {"<unk>", "det", "other"};
  for (int i = 0; i < 30; ++i) words.push_back("f" + std::string(1, static_cast<char>('a' + i % 26)) + std::to_string(i));
  WhitespaceTokenizer tok(words);
  SyntheticBackend backend(64, tok.id(), 3);
  const std::vector<TokenId> det = {1};
  const auto sae = build_lexical_sae(backend, det, tok.vocab_size());

  // For every position 0..20, one sample marks the detector word there and
  // one marks a non-detector word there, with identical surrounding filler.
  std::string response;
  std::mt19937_64 gen(9);
  for (std::size_t p = 0; p <= 20; ++p) {
    std::vector<std::string> filler;
    for (std::size_t k = 0; k < 24; ++k) filler.push_back(words[3 + gen() % 30]);
    for (const char* target : {"det", "other"}) {
      std::string s;
      for (std::size_t k = 0; k < filler.size(); ++k) {
        if (k) s += ' ';
        s += k == p ? std::string("{{") + target + "}}" : filler[k];
      }
      response += s + "\n<SAMPLE_SEPARATOR/>\n";
    }
  }
  const auto samples = parse_samples(response, &tok);
  const auto rec = score_feature(sae, backend, tok, 0, samples);
  const std::vector<SensitivityRecord> recs = {rec};
  const auto buckets = position_stratified_rates(recs);
  bool equal = true;
  std::string detail;
  for (const auto& b : buckets) {
    if (b.label == "unmarked") {
      equal &= b.n == 0;
      continue;
    }
    equal &= b.rate.has_value() && *b.rate == *buckets.front().rate;
    detail += fmt("%s%s=%zu/%zu", detail.empty() ? "" : " ", b.label.c_str(), b.n_activating, b.n);
  }
  return {equal, "bucket rates " + detail};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::off);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"synthetic end-to-end oracle", check_end_to_end},
      {"encoder equivalence", check_encoder},
      {"filtering semantics", check_filtering},
      {"LCS oracle", check_lcs},
      {"Spearman", check_spearman},
      {"frequency weighting", check_weighting},
      {"prompt golden file", check_prompt},
      {"determinism", check_determinism},
      {"position invariance", check_position_invariance},
  };
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s  %-28s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", checks.size() - failed, checks.size());
  return failed;
}
