#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/backend.hpp"
#include "saesens/corpus.hpp"
#include "saesens/sae.hpp"

namespace saesens {

// Half-open token range [start, end).
struct MarkerSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const MarkerSpan&) const = default;
};

struct ExampleSource {
  std::size_t sequence_index = 0;  // position in the scanned CorpusSample
  std::string source_id;
  std::size_t sequence_offset = 0;  // sequence start within the source document
  std::size_t token_index = 0;      // peak token, relative to the sequence
};

struct ActivatingExample {
  std::vector<TokenId> tokens;
  std::vector<std::string> texts;
  std::vector<float> activations;  // per window token
  std::vector<MarkerSpan> marker_spans;
  float peak_activation = 0.0f;
  std::size_t peak_position = 0;  // within the window
  ExampleSource source;

  void validate() const;
  // Index of the last activating token in the window. Requires a marker.
  std::size_t last_marked_token() const;
};

struct ExampleSet {
  FeatureId feature_id = 0;
  std::vector<ActivatingExample> top_examples;      // by peak activation, descending
  std::vector<ActivatingExample> sampled_examples;  // importance-weighted draws
  std::vector<ActivatingExample> held_out;          // reserved for annotation positive controls
  std::size_t occurrence_count = 0;   // sequences with any activation
  std::size_t active_token_count = 0;
  std::size_t tokens_scanned = 0;

  // top_examples followed by sampled_examples.
  std::vector<const ActivatingExample*> shown() const;
  std::size_t shown_count() const { return top_examples.size() + sampled_examples.size(); }
};

struct CollectorConfig {
  std::size_t window_before = 10;
  std::size_t window_after = 10;
  std::size_t n_top = 10;
  std::size_t n_sampled = 5;
  std::size_t n_held_out = 1;
};

struct FilterCutoffs {
  std::size_t min_examples = 15;
  double truncation_rate = 0.9;
};

struct FilterVerdict {
  FeatureId feature_id = 0;
  std::size_t occurrence_count = 0;
  bool enough_examples = false;
  double truncation_rate = 0.0;
  bool passed = false;
};

// All candidate examples of one feature (one per activating sequence) before selection.
struct FeatureScan {
  FeatureId feature_id = 0;
  std::vector<ActivatingExample> candidates;
  std::size_t active_token_count = 0;
  std::size_t tokens_scanned = 0;

  double frequency() const {
    return tokens_scanned ? static_cast<double>(active_token_count) / static_cast<double>(tokens_scanned) : 0.0;
  }
};

// One pass over the sample computing every requested feature; for each
// sequence where a feature fires, one candidate centred on its peak token.
std::vector<FeatureScan> scan_sample(const SaeModel& model, const ActivationBackend& backend,
                                     const CorpusSample& sample, std::span<const FeatureId> feature_ids,
                                     const CollectorConfig& config = {});

// Top n_top by peak (ties by sequence index then token index), then n_sampled
// weighted draws without replacement from the rest, then n_held_out more.
// The draw stream is derived from (rng_seed, feature id).
ExampleSet select_examples(const FeatureScan& scan, std::uint64_t rng_seed, const CollectorConfig& config = {});

ExampleSet collect_examples(const SaeModel& model, const ActivationBackend& backend, const CorpusSample& sample,
                            FeatureId feature_id, std::uint64_t rng_seed, const CollectorConfig& config = {});

// Fraction of shown examples whose window, fed as a standalone sequence,
// still activates the feature at any position.
double truncation_activation_rate(const SaeModel& model, const ActivationBackend& backend,
                                  const ExampleSet& examples);

FilterVerdict filter_feature(FeatureId feature_id, std::size_t occurrence_count, double truncation_rate,
                             const FilterCutoffs& cutoffs = {});

// Concatenates token texts; each maximal marked run is wrapped in {{ }}.
// Newlines are written as the two characters `\n`. A literal brace that would
// touch another brace of the same kind is escaped with a backslash so that
// `{{` and `}}` only ever denote markers.
std::string render_marked(std::span<const std::string> texts, std::span<const MarkerSpan> spans);
std::string render_example(const ActivatingExample& example);

// Token texts concatenated with no markup.
std::string plain_text(const ActivatingExample& example);

nlohmann::json to_json(const ActivatingExample& e);
ActivatingExample activating_example_from_json(const nlohmann::json& j);

inline constexpr int kExampleSetSchema = 1;
nlohmann::json to_json(const ExampleSet& s);
ExampleSet example_set_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FilterVerdict& v);
FilterVerdict filter_verdict_from_json(const nlohmann::json& j);

}  // namespace saesens
