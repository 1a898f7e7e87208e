#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/aggregation.hpp"
#include "saesens/annotation.hpp"
#include "saesens/backend.hpp"
#include "saesens/corpus.hpp"
#include "saesens/examples.hpp"
#include "saesens/generation.hpp"

namespace saesens {

struct SaeEntry {
  std::string id;
  std::filesystem::path path;
};

// One JSON file; relative paths resolve against the file's directory.
//
// {
//   "corpus":    {"path": "corpus.txt", "format": "text_lines"},
//   "tokenizer": {"vocab": "vocab.txt"},
//   "saes":      [{"id": "lexical", "path": "sae.safetensors"}],
//   "backend":   "synthetic" | "http://host:port",
//   "backend_salt": 0,
//   "seed": 0,
//   "sampling":  {"token_budget": 100000, "seq_len": 64},
//   "features":  {"count": 1000, "ids": [..]},
//   "filter":    {"min_examples": 15, "truncation_cutoff": 0.9},
//   "generation": {"transport": "openai" | "scripted", "scripted_responses": "...",
//                  "model", "temperature", "max_tokens", "samples", "accept_count",
//                  "min_usable", "max_attempts", "retry_backoff_ms", "max_in_flight",
//                  "requests_per_minute",
//                  "endpoint", "cache_dir"},
//   "analysis":  {"interp_scores": "interp.csv", "frequency_bins": 20, "overlap_max_n": 10},
//   "annotation": {"n_items": 10, "mix": "0.2,0.2,0.6", "seed": 0, "interp_threshold": 0.9,
//                  "sae": "lexical"},
//   "output_dir": "out"
// }
struct RunConfig {
  std::filesystem::path source;  // config file, empty when built in code

  std::filesystem::path corpus_path;
  CorpusFormat corpus_format = CorpusFormat::text_lines;
  std::filesystem::path vocab_path;
  std::vector<SaeEntry> saes;
  std::string backend = "synthetic";
  std::uint64_t backend_salt = 0;
  std::uint64_t seed = 0;

  std::size_t token_budget = 100000;
  std::size_t seq_len = 64;

  std::size_t feature_count = 1000;
  std::vector<FeatureId> feature_ids;  // explicit list overrides feature_count

  FilterCutoffs filter;
  CollectorConfig collector;

  GenerationSettings generation;
  std::string transport = "openai";
  std::filesystem::path scripted_responses;
  std::string llm_endpoint = "https://api.openai.com";
  std::size_t max_in_flight = 4;
  double requests_per_minute = 0.0;
  std::filesystem::path cache_dir;  // empty: no response cache

  std::filesystem::path interp_scores;  // empty: no interp correlation
  std::size_t frequency_bins = 20;
  std::size_t overlap_max_n = 10;

  std::size_t session_items = 10;
  SessionMix session_mix;
  std::uint64_t session_seed = 0;
  double interp_threshold = 0.9;
  std::string session_sae;  // empty: first SAE

  std::filesystem::path output_dir = "out";

  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::filesystem::path& path);
  // Paths exist, cutoffs in (0, 1], counts >= 1. Throws ConfigError.
  void validate() const;
  // Paths are written relative to `base` when it is set, so the hash of a
  // relocated run directory is unchanged.
  nlohmann::json to_json(const std::filesystem::path& base = {}) const;
};

enum class StageStatus { ok, partial };

struct StageResult {
  StageStatus status = StageStatus::ok;
  std::vector<std::string> notes;
};

// Records the hashes of every stage's inputs and outputs in
// <output_dir>/manifest.json. Each stage checks that its predecessor
// completed and that the predecessor's outputs are unchanged on disk.
class Manifest {
 public:
  static const std::vector<std::string>& stage_order();

  explicit Manifest(std::filesystem::path output_dir);

  // Throws ChainError("run stage X first") when a prerequisite is missing or stale.
  void require_before(const std::string& stage) const;
  // Records a completed stage and drops every later stage.
  void record(const std::string& stage, const std::map<std::string, std::string>& inputs,
              const std::vector<std::filesystem::path>& outputs);
  bool has(const std::string& stage) const;
  const nlohmann::json& json() const { return doc_; }

 private:
  void save() const;
  std::filesystem::path dir_;
  nlohmann::json doc_;
};

// Everything a stage needs, built once from the config.
class PipelineContext {
 public:
  explicit PipelineContext(RunConfig config);

  const RunConfig& config() const { return config_; }
  std::shared_ptr<const Tokenizer> tokenizer() const { return tokenizer_; }
  const SaeModel& sae(const std::string& id) const;
  const ActivationBackend& backend(const std::string& sae_id) const;
  std::filesystem::path sae_dir(const std::string& sae_id) const;
  // LLM transport per config; overridable for tests.
  LlmTransport& transport();
  void set_transport(std::shared_ptr<LlmTransport> transport) { transport_ = std::move(transport); }

 private:
  RunConfig config_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::map<std::string, SaeModel> saes_;
  std::map<std::string, std::unique_ptr<ActivationBackend>> backends_;
  std::shared_ptr<LlmTransport> transport_;
};

// Uniform sample without replacement of `count` ids from [0, width), ascending.
std::vector<FeatureId> sample_feature_ids(std::size_t width, std::size_t count, std::uint64_t seed);

StageResult run_collect(PipelineContext& ctx);
StageResult run_generate(PipelineContext& ctx);
StageResult run_score(PipelineContext& ctx);
StageResult run_analyze(PipelineContext& ctx);
// Assembles a session from the analyzed run artifacts of the configured SAE.
// Storing it is up to the caller (see AnnotationService::add_session).
Session run_session_build(PipelineContext& ctx, const std::string& session_id);

// Per-SAE artifact readers.
std::vector<ExampleSet> read_example_sets(const std::filesystem::path& file);
std::vector<FilterVerdict> read_verdicts(const std::filesystem::path& file);
std::vector<GenerationResult> read_generations(const std::filesystem::path& file);
std::vector<SensitivityRecord> read_sensitivity(const std::filesystem::path& file);
std::vector<UnevaluatedFeature> read_unevaluated(const std::filesystem::path& file);

// JSON-lines helpers; files end with a newline after every record.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& file);
void write_jsonl(const std::filesystem::path& file, const std::vector<nlohmann::json>& rows);

}  // namespace saesens
