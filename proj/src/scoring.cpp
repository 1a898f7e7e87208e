#include "saesens/scoring.hpp"

#include <spdlog/spdlog.h>

#include "saesens/error.hpp"

namespace saesens {

SensitivityRecord score_feature(const SaeModel& model, const ActivationBackend& backend, const Tokenizer& tokenizer,
                                FeatureId feature_id, std::span<const GeneratedSample> samples) {
  if (samples.empty()) throw PreconditionError("score_feature needs at least one sample");
  if (!backend.deterministic()) throw ConfigError("backend " + backend.name() + " is not deterministic");
  if (!backend.tokenizer_id().empty() && backend.tokenizer_id() != tokenizer.id()) {
    throw ConfigError("scoring tokenizer '" + tokenizer.id() + "' does not match backend tokenizer '" +
                      backend.tokenizer_id() + "'");
  }
  SensitivityRecord rec;
  rec.feature_id = feature_id;
  const FeatureId ids[] = {feature_id};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Encoding enc = tokenizer.encode(samples[i].clean_text);
    if (enc.ids.empty()) {
      spdlog::warn("feature {} sample {} tokenizes to nothing; dropped", feature_id, i);
      ++rec.n_dropped;
      continue;
    }
    TokenSequence seq{enc.ids, enc.texts, "generated", 0, tokenizer.id()};
    FeatureActivations acts;
    try {
      acts = feature_activation_on_sequence(model, backend, seq, ids);
    } catch (const TransportError& e) {
      spdlog::warn("feature {} sample {} unscored: {}", feature_id, i, e.what());
      ++rec.n_unscored;
      continue;
    }
    SampleOutcome out;
    out.sample_index = i;
    out.activated = acts.any_active(0);
    out.peak_activation = acts.peak(0);
    out.first_target_token_index = samples[i].first_target_token_index;
    rec.n_activating += out.activated ? 1 : 0;
    rec.per_sample.push_back(out);
  }
  rec.n_samples = rec.per_sample.size();
  if (rec.n_samples == 0) {
    throw PreconditionError("feature " + std::to_string(feature_id) + " has no scorable samples");
  }
  rec.sensitivity = static_cast<double>(rec.n_activating) / static_cast<double>(rec.n_samples);
  return rec;
}

ScoreRun score_run(const SaeModel& model, const ActivationBackend& backend, const Tokenizer& tokenizer,
                   std::span<const FeatureId> features, const std::map<FeatureId, GenerationResult>& results) {
  ScoreRun run;
  for (FeatureId f : features) {
    auto it = results.find(f);
    if (it == results.end()) {
      run.unevaluated.push_back({f, "no generation result"});
      continue;
    }
    const GenerationResult& gen = it->second;
    if (!gen.usable() || gen.samples.empty()) {
      run.unevaluated.push_back({f, gen.error.empty() ? "generation unusable" : gen.error});
      continue;
    }
    try {
      run.records.push_back(score_feature(model, backend, tokenizer, f, gen.samples));
    } catch (const PreconditionError& e) {
      run.unevaluated.push_back({f, e.what()});
    }
  }
  return run;
}

std::vector<PositionBucket> position_stratified_rates(std::span<const SensitivityRecord> records) {
  std::vector<PositionBucket> buckets;
  for (const char* label : {"0", "1-5", "6-10", "11+", "unmarked"}) {
    PositionBucket b;
    b.label = label;
    buckets.push_back(b);
  }
  for (const auto& rec : records) {
    for (const auto& s : rec.per_sample) {
      std::size_t b;
      if (!s.first_target_token_index) {
        b = 4;
      } else if (*s.first_target_token_index == 0) {
        b = 0;
      } else if (*s.first_target_token_index <= 5) {
        b = 1;
      } else if (*s.first_target_token_index <= 10) {
        b = 2;
      } else {
        b = 3;
      }
      ++buckets[b].n;
      buckets[b].n_activating += s.activated ? 1 : 0;
    }
  }
  for (auto& b : buckets) {
    if (b.n) b.rate = static_cast<double>(b.n_activating) / static_cast<double>(b.n);
  }
  return buckets;
}

nlohmann::json to_json(const SensitivityRecord& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : r.per_sample) {
    per.push_back({{"sample_index", s.sample_index},
                   {"activated", s.activated},
                   {"peak_activation", s.peak_activation},
                   {"first_target_token_index", s.first_target_token_index
                                                    ? nlohmann::json(*s.first_target_token_index)
                                                    : nlohmann::json(nullptr)}});
  }
  return {{"feature_id", r.feature_id},       {"n_samples", r.n_samples},   {"n_activating", r.n_activating},
          {"sensitivity", r.sensitivity},     {"n_dropped", r.n_dropped},   {"n_unscored", r.n_unscored},
          {"per_sample", std::move(per)}};
}

SensitivityRecord sensitivity_record_from_json(const nlohmann::json& j) {
  SensitivityRecord r;
  r.feature_id = j.at("feature_id").get<FeatureId>();
  r.n_samples = j.at("n_samples").get<std::size_t>();
  r.n_activating = j.at("n_activating").get<std::size_t>();
  r.sensitivity = j.at("sensitivity").get<double>();
  r.n_dropped = j.value("n_dropped", std::size_t{0});
  r.n_unscored = j.value("n_unscored", std::size_t{0});
  for (const auto& s : j.at("per_sample")) {
    SampleOutcome o;
    o.sample_index = s.at("sample_index").get<std::size_t>();
    o.activated = s.at("activated").get<bool>();
    o.peak_activation = s.at("peak_activation").get<float>();
    if (const auto& f = s.at("first_target_token_index"); !f.is_null()) o.first_target_token_index = f.get<std::size_t>();
    r.per_sample.push_back(o);
  }
  return r;
}

nlohmann::json to_json(const std::vector<PositionBucket>& buckets) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& b : buckets) {
    out.push_back({{"bucket", b.label},
                   {"n", b.n},
                   {"n_activating", b.n_activating},
                   {"rate", b.rate ? nlohmann::json(*b.rate) : nlohmann::json(nullptr)}});
  }
  return out;
}

}  // namespace saesens
