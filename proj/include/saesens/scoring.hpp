#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/backend.hpp"
#include "saesens/generation.hpp"

namespace saesens {

struct SampleOutcome {
  std::size_t sample_index = 0;
  bool activated = false;
  float peak_activation = 0.0f;
  std::optional<std::size_t> first_target_token_index;
};

struct SensitivityRecord {
  FeatureId feature_id = 0;
  std::size_t n_samples = 0;  // scored samples
  std::size_t n_activating = 0;
  double sensitivity = 0.0;   // n_activating / n_samples
  std::vector<SampleOutcome> per_sample;
  std::size_t n_dropped = 0;   // samples that tokenized to nothing
  std::size_t n_unscored = 0;  // samples lost to backend errors
  bool partial() const { return n_unscored > 0; }
};

// A sample counts as activating iff the feature is > 0 at any token. Samples
// that tokenize to zero tokens are left out of the denominator. Throws
// PreconditionError if nothing remains to score.
SensitivityRecord score_feature(const SaeModel& model, const ActivationBackend& backend, const Tokenizer& tokenizer,
                                FeatureId feature_id, std::span<const GeneratedSample> samples);

struct UnevaluatedFeature {
  FeatureId feature_id = 0;
  std::string reason;
};

struct ScoreRun {
  std::vector<SensitivityRecord> records;
  std::vector<UnevaluatedFeature> unevaluated;
};

// One record per feature with a usable generation; everything else is listed
// as unevaluated, never scored as zero.
ScoreRun score_run(const SaeModel& model, const ActivationBackend& backend, const Tokenizer& tokenizer,
                   std::span<const FeatureId> features, const std::map<FeatureId, GenerationResult>& results);

struct PositionBucket {
  std::string label;  // "0", "1-5", "6-10", "11+", "unmarked"
  std::size_t n = 0;
  std::size_t n_activating = 0;
  std::optional<double> rate;  // absent when n == 0
};

// Activation rate by number of tokens preceding the first marked target.
std::vector<PositionBucket> position_stratified_rates(std::span<const SensitivityRecord> records);

nlohmann::json to_json(const SensitivityRecord& r);
SensitivityRecord sensitivity_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<PositionBucket>& buckets);

}  // namespace saesens
