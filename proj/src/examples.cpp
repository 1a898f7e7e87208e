#include "saesens/examples.hpp"

#include <algorithm>
#include <numeric>

#include "saesens/error.hpp"
#include "saesens/rng.hpp"

namespace saesens {

void ActivatingExample::validate() const {
  if (tokens.size() != texts.size() || tokens.size() != activations.size()) {
    throw ValidationError("activating example has inconsistent lengths");
  }
  if (!(peak_activation > 0.0f)) throw ValidationError("activating example peak must be positive");
  for (const auto& s : marker_spans) {
    if (s.start >= s.end || s.end > tokens.size()) throw ValidationError("marker span out of bounds");
  }
}

std::size_t ActivatingExample::last_marked_token() const {
  if (marker_spans.empty()) throw PreconditionError("activating example has no marker");
  return marker_spans.back().end - 1;
}

std::vector<const ActivatingExample*> ExampleSet::shown() const {
  std::vector<const ActivatingExample*> out;
  for (const auto& e : top_examples) out.push_back(&e);
  for (const auto& e : sampled_examples) out.push_back(&e);
  return out;
}

namespace {

std::vector<MarkerSpan> active_runs(std::span<const float> acts) {
  std::vector<MarkerSpan> spans;
  for (std::size_t i = 0; i < acts.size();) {
    if (acts[i] > 0.0f) {
      std::size_t j = i;
      while (j < acts.size() && acts[j] > 0.0f) ++j;
      spans.push_back({i, j});
      i = j;
    } else {
      ++i;
    }
  }
  return spans;
}

bool ranks_before(const ActivatingExample& a, const ActivatingExample& b) {
  if (a.peak_activation != b.peak_activation) return a.peak_activation > b.peak_activation;
  if (a.source.sequence_index != b.source.sequence_index) return a.source.sequence_index < b.source.sequence_index;
  return a.source.token_index < b.source.token_index;
}

}  // namespace

std::vector<FeatureScan> scan_sample(const SaeModel& model, const ActivationBackend& backend,
                                     const CorpusSample& sample, std::span<const FeatureId> feature_ids,
                                     const CollectorConfig& config) {
  std::vector<FeatureScan> scans(feature_ids.size());
  for (std::size_t c = 0; c < feature_ids.size(); ++c) scans[c].feature_id = feature_ids[c];

  for (std::size_t s = 0; s < sample.sequences.size(); ++s) {
    const auto& seq = sample.sequences[s];
    const auto acts = feature_activation_on_sequence(model, backend, seq, feature_ids);
    const std::size_t n = seq.tokens.size();
    for (std::size_t c = 0; c < feature_ids.size(); ++c) {
      auto& scan = scans[c];
      scan.tokens_scanned += n;
      std::size_t peak_at = n;
      float peak = 0.0f;
      for (std::size_t t = 0; t < n; ++t) {
        const float v = acts.values(t, c);
        if (v > 0.0f) {
          ++scan.active_token_count;
          if (v > peak) {
            peak = v;
            peak_at = t;
          }
        }
      }
      if (peak_at == n) continue;

      const std::size_t lo = peak_at >= config.window_before ? peak_at - config.window_before : 0;
      const std::size_t hi = std::min(n, peak_at + config.window_after + 1);
      ActivatingExample ex;
      ex.tokens.assign(seq.tokens.begin() + static_cast<std::ptrdiff_t>(lo),
                       seq.tokens.begin() + static_cast<std::ptrdiff_t>(hi));
      ex.texts.assign(seq.texts.begin() + static_cast<std::ptrdiff_t>(lo),
                      seq.texts.begin() + static_cast<std::ptrdiff_t>(hi));
      ex.activations.resize(hi - lo);
      for (std::size_t t = lo; t < hi; ++t) ex.activations[t - lo] = acts.values(t, c);
      ex.marker_spans = active_runs(ex.activations);
      ex.peak_activation = peak;
      ex.peak_position = peak_at - lo;
      ex.source = {s, seq.source_id, seq.offset, peak_at};
      scan.candidates.push_back(std::move(ex));
    }
  }
  return scans;
}

ExampleSet select_examples(const FeatureScan& scan, std::uint64_t rng_seed, const CollectorConfig& config) {
  ExampleSet set;
  set.feature_id = scan.feature_id;
  set.occurrence_count = scan.candidates.size();
  set.active_token_count = scan.active_token_count;
  set.tokens_scanned = scan.tokens_scanned;

  std::vector<std::size_t> order(scan.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ranks_before(scan.candidates[a], scan.candidates[b]); });

  const std::size_t n_top = std::min(config.n_top, order.size());
  for (std::size_t i = 0; i < n_top; ++i) set.top_examples.push_back(scan.candidates[order[i]]);

  // Remaining pool keeps rank order so the weighted draw is reproducible.
  std::vector<std::size_t> pool(order.begin() + static_cast<std::ptrdiff_t>(n_top), order.end());
  Rng rng(derive_seed(rng_seed, scan.feature_id));
  auto draw = [&]() {
    double total = 0.0;
    for (std::size_t idx : pool) total += scan.candidates[idx].peak_activation;
    double r = rng.uniform() * total;
    std::size_t pick = pool.size() - 1;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      r -= scan.candidates[pool[i]].peak_activation;
      if (r < 0.0) {
        pick = i;
        break;
      }
    }
    const std::size_t chosen = pool[pick];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    return chosen;
  };
  for (std::size_t i = 0; i < config.n_sampled && !pool.empty(); ++i) {
    set.sampled_examples.push_back(scan.candidates[draw()]);
  }
  for (std::size_t i = 0; i < config.n_held_out && !pool.empty(); ++i) {
    set.held_out.push_back(scan.candidates[draw()]);
  }
  return set;
}

ExampleSet collect_examples(const SaeModel& model, const ActivationBackend& backend, const CorpusSample& sample,
                            FeatureId feature_id, std::uint64_t rng_seed, const CollectorConfig& config) {
  const FeatureId ids[] = {feature_id};
  auto scans = scan_sample(model, backend, sample, ids, config);
  return select_examples(scans.front(), rng_seed, config);
}

double truncation_activation_rate(const SaeModel& model, const ActivationBackend& backend,
                                  const ExampleSet& examples) {
  const auto shown = examples.shown();
  if (shown.empty()) throw PreconditionError("truncation rate needs at least one example");
  const FeatureId ids[] = {examples.feature_id};
  std::size_t hits = 0;
  for (const ActivatingExample* ex : shown) {
    TokenSequence window;
    window.tokens = ex->tokens;
    window.texts = ex->texts;
    window.source_id = ex->source.source_id;
    const auto acts = feature_activation_on_sequence(model, backend, window, ids);
    if (acts.any_active(0)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(shown.size());
}

FilterVerdict filter_feature(FeatureId feature_id, std::size_t occurrence_count, double truncation_rate,
                             const FilterCutoffs& cutoffs) {
  FilterVerdict v;
  v.feature_id = feature_id;
  v.occurrence_count = occurrence_count;
  v.truncation_rate = truncation_rate;
  v.enough_examples = occurrence_count >= cutoffs.min_examples;
  v.passed = v.enough_examples && truncation_rate >= cutoffs.truncation_rate;
  return v;
}

std::string render_marked(std::span<const std::string> texts, std::span<const MarkerSpan> spans) {
  struct Unit {
    char c;
    bool literal;
  };
  std::vector<Unit> units;
  auto literal = [&](const std::string& s) {
    for (char c : s) {
      if (c == '\n') {
        units.push_back({'\\', true});
        units.push_back({'n', true});
      } else {
        units.push_back({c, true});
      }
    }
  };
  std::size_t next_span = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const bool opens = next_span < spans.size() && spans[next_span].start == i;
    if (opens) {
      units.push_back({'{', false});
      units.push_back({'{', false});
    }
    literal(texts[i]);
    if (next_span < spans.size() && spans[next_span].end == i + 1) {
      units.push_back({'}', false});
      units.push_back({'}', false});
      ++next_span;
    }
  }
  std::string out;
  out.reserve(units.size() + 8);
  for (std::size_t i = 0; i < units.size(); ++i) {
    const char c = units[i].c;
    if (units[i].literal && (c == '{' || c == '}')) {
      const bool touches = (i > 0 && units[i - 1].c == c) || (i + 1 < units.size() && units[i + 1].c == c);
      if (touches) out.push_back('\\');
    }
    out.push_back(c);
  }
  return out;
}

std::string render_example(const ActivatingExample& example) {
  return render_marked(example.texts, example.marker_spans);
}

std::string plain_text(const ActivatingExample& example) {
  std::string out;
  for (const auto& t : example.texts) out += t;
  return out;
}

nlohmann::json to_json(const ActivatingExample& e) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : e.marker_spans) spans.push_back({s.start, s.end});
  return {{"tokens", e.tokens},
          {"texts", e.texts},
          {"activations", e.activations},
          {"marker_spans", std::move(spans)},
          {"peak_activation", e.peak_activation},
          {"peak_position", e.peak_position},
          {"source",
           {{"sequence_index", e.source.sequence_index},
            {"source_id", e.source.source_id},
            {"sequence_offset", e.source.sequence_offset},
            {"token_index", e.source.token_index}}}};
}

ActivatingExample activating_example_from_json(const nlohmann::json& j) {
  ActivatingExample e;
  e.tokens = j.at("tokens").get<std::vector<TokenId>>();
  e.texts = j.at("texts").get<std::vector<std::string>>();
  e.activations = j.at("activations").get<std::vector<float>>();
  for (const auto& s : j.at("marker_spans")) e.marker_spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  e.peak_activation = j.at("peak_activation").get<float>();
  e.peak_position = j.at("peak_position").get<std::size_t>();
  const auto& src = j.at("source");
  e.source.sequence_index = src.at("sequence_index").get<std::size_t>();
  e.source.source_id = src.at("source_id").get<std::string>();
  e.source.sequence_offset = src.at("sequence_offset").get<std::size_t>();
  e.source.token_index = src.at("token_index").get<std::size_t>();
  return e;
}

namespace {
nlohmann::json list_json(const std::vector<ActivatingExample>& xs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& x : xs) a.push_back(to_json(x));
  return a;
}
std::vector<ActivatingExample> list_from_json(const nlohmann::json& a) {
  std::vector<ActivatingExample> xs;
  for (const auto& x : a) xs.push_back(activating_example_from_json(x));
  return xs;
}
}  // namespace

nlohmann::json to_json(const ExampleSet& s) {
  return {{"schema", kExampleSetSchema},
          {"feature_id", s.feature_id},
          {"occurrence_count", s.occurrence_count},
          {"active_token_count", s.active_token_count},
          {"tokens_scanned", s.tokens_scanned},
          {"top_examples", list_json(s.top_examples)},
          {"sampled_examples", list_json(s.sampled_examples)},
          {"held_out", list_json(s.held_out)}};
}

ExampleSet example_set_from_json(const nlohmann::json& j) {
  if (j.value("schema", 0) != kExampleSetSchema) throw FormatError("unsupported example set schema", 0);
  ExampleSet s;
  s.feature_id = j.at("feature_id").get<FeatureId>();
  s.occurrence_count = j.at("occurrence_count").get<std::size_t>();
  s.active_token_count = j.at("active_token_count").get<std::size_t>();
  s.tokens_scanned = j.at("tokens_scanned").get<std::size_t>();
  s.top_examples = list_from_json(j.at("top_examples"));
  s.sampled_examples = list_from_json(j.at("sampled_examples"));
  s.held_out = list_from_json(j.at("held_out"));
  return s;
}

nlohmann::json to_json(const FilterVerdict& v) {
  return {{"feature_id", v.feature_id},
          {"occurrence_count", v.occurrence_count},
          {"enough_examples", v.enough_examples},
          {"truncation_rate", v.truncation_rate},
          {"passed", v.passed}};
}

FilterVerdict filter_verdict_from_json(const nlohmann::json& j) {
  FilterVerdict v;
  v.feature_id = j.at("feature_id").get<FeatureId>();
  v.occurrence_count = j.at("occurrence_count").get<std::size_t>();
  v.enough_examples = j.at("enough_examples").get<bool>();
  v.truncation_rate = j.at("truncation_rate").get<double>();
  v.passed = j.at("passed").get<bool>();
  return v;
}

}  // namespace saesens
