#include "saesens/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "saesens/error.hpp"
#include "saesens/io.hpp"
#include "saesens/rng.hpp"
#include "saesens/scoring.hpp"
#include "saesens/text_analysis.hpp"

namespace saesens {

namespace fs = std::filesystem;

namespace {

// Stream keys for derive_seed, one per consumer of the run seed.
constexpr std::uint64_t kSeedCorpus = 1;
constexpr std::uint64_t kSeedFeatures = 2;
constexpr std::uint64_t kSeedExamples = 3;

std::uint64_t string_key(const std::string& s) { return std::stoull(sha256_hex(s).substr(0, 16), nullptr, 16); }

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field ") + key + ": " + e.what());
  }
}

nlohmann::json section(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return nlohmann::json::object();
  if (!j.at(key).is_object()) throw ConfigError(std::string("config section ") + key + " must be an object");
  return j.at(key);
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const auto corpus = section(j, "corpus");
  c.corpus_path = resolve(base, get_or<std::string>(corpus, "path", ""));
  c.corpus_format = parse_corpus_format(get_or<std::string>(corpus, "format", "text_lines"));
  c.vocab_path = resolve(base, get_or<std::string>(section(j, "tokenizer"), "vocab", ""));
  if (j.contains("saes")) {
    for (const auto& s : j.at("saes")) {
      c.saes.push_back({get_or<std::string>(s, "id", ""), resolve(base, get_or<std::string>(s, "path", ""))});
    }
  }
  c.backend = get_or<std::string>(j, "backend", "synthetic");
  c.backend_salt = get_or<std::uint64_t>(j, "backend_salt", 0);
  c.seed = get_or<std::uint64_t>(j, "seed", 0);

  const auto sampling = section(j, "sampling");
  c.token_budget = get_or<std::size_t>(sampling, "token_budget", c.token_budget);
  c.seq_len = get_or<std::size_t>(sampling, "seq_len", c.seq_len);

  const auto features = section(j, "features");
  c.feature_count = get_or<std::size_t>(features, "count", c.feature_count);
  c.feature_ids = get_or<std::vector<FeatureId>>(features, "ids", {});

  const auto filter = section(j, "filter");
  c.filter.min_examples = get_or<std::size_t>(filter, "min_examples", c.filter.min_examples);
  c.filter.truncation_rate = get_or<double>(filter, "truncation_cutoff", c.filter.truncation_rate);

  const auto gen = section(j, "generation");
  c.transport = get_or<std::string>(gen, "transport", c.transport);
  c.scripted_responses = resolve(base, get_or<std::string>(gen, "scripted_responses", ""));
  c.llm_endpoint = get_or<std::string>(gen, "endpoint", c.llm_endpoint);
  c.generation.model = get_or<std::string>(gen, "model", c.generation.model);
  c.generation.temperature = get_or<double>(gen, "temperature", c.generation.temperature);
  c.generation.max_tokens = get_or<int>(gen, "max_tokens", c.generation.max_tokens);
  c.generation.samples_requested = get_or<std::size_t>(gen, "samples", c.generation.samples_requested);
  c.generation.accept_count = get_or<std::size_t>(gen, "accept_count", c.generation.accept_count);
  c.generation.min_usable = get_or<std::size_t>(gen, "min_usable", c.generation.min_usable);
  c.generation.max_attempts = get_or<int>(gen, "max_attempts", c.generation.max_attempts);
  c.generation.retry_backoff =
      std::chrono::milliseconds(get_or<std::int64_t>(gen, "retry_backoff_ms", c.generation.retry_backoff.count()));
  if (gen.contains("seed") && !gen.at("seed").is_null()) c.generation.seed = gen.at("seed").get<std::int64_t>();
  c.max_in_flight = get_or<std::size_t>(gen, "max_in_flight", c.max_in_flight);
  c.requests_per_minute = get_or<double>(gen, "requests_per_minute", c.requests_per_minute);
  c.cache_dir = resolve(base, get_or<std::string>(gen, "cache_dir", ""));

  const auto analysis = section(j, "analysis");
  c.interp_scores = resolve(base, get_or<std::string>(analysis, "interp_scores", ""));
  c.frequency_bins = get_or<std::size_t>(analysis, "frequency_bins", c.frequency_bins);
  c.overlap_max_n = get_or<std::size_t>(analysis, "overlap_max_n", c.overlap_max_n);

  const auto ann = section(j, "annotation");
  c.session_items = get_or<std::size_t>(ann, "n_items", c.session_items);
  if (ann.contains("mix")) c.session_mix = SessionMix::parse(ann.at("mix").get<std::string>());
  c.session_seed = get_or<std::uint64_t>(ann, "seed", c.session_seed);
  c.interp_threshold = get_or<double>(ann, "interp_threshold", c.interp_threshold);
  c.session_sae = get_or<std::string>(ann, "sae", "");

  c.output_dir = resolve(base, get_or<std::string>(j, "output_dir", "out"));
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config " + path.string() + ": " + e.what(), e.byte);
  }
  RunConfig c = from_json(j, path.parent_path());
  c.source = path;
  return c;
}

void RunConfig::validate() const {
  auto must_exist = [](const fs::path& p, const std::string& what) {
    if (p.empty()) throw ConfigError(what + " path is not set");
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
  };
  must_exist(corpus_path, "corpus");
  if (!vocab_path.empty()) must_exist(vocab_path, "tokenizer vocab");
  if (vocab_path.empty() && backend == "synthetic") throw ConfigError("synthetic backend needs tokenizer.vocab");
  if (saes.empty()) throw ConfigError("config lists no SAEs");
  std::set<std::string> ids;
  for (const auto& s : saes) {
    if (s.id.empty()) throw ConfigError("SAE entry without id");
    if (s.id.find_first_of("/\\") != std::string::npos || s.id == "." || s.id == ".." || s.id == "logs") {
      throw ConfigError("SAE id is not usable as a directory name: " + s.id);
    }
    if (!ids.insert(s.id).second) throw ConfigError("duplicate SAE id: " + s.id);
    if (!fs::exists(s.path)) throw LoadError("SAE weights not found: " + s.path.string());
  }
  if (backend != "synthetic" && backend.rfind("http://", 0) != 0 && backend.rfind("https://", 0) != 0) {
    throw ConfigError("backend must be \"synthetic\" or an http(s) URL: " + backend);
  }
  if (!(filter.truncation_rate > 0.0 && filter.truncation_rate <= 1.0)) {
    throw ConfigError("truncation cutoff must be in (0, 1]");
  }
  if (filter.min_examples < 1) throw ConfigError("min_examples must be >= 1");
  if (feature_ids.empty() && feature_count < 1) throw ConfigError("feature count must be >= 1");
  if (token_budget < 1 || seq_len < 1) throw ConfigError("token_budget and seq_len must be >= 1");
  if (generation.samples_requested < 1 || generation.accept_count < 1 || generation.min_usable < 1) {
    throw ConfigError("generation sample counts must be >= 1");
  }
  if (generation.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
  if (transport == "scripted") {
    must_exist(scripted_responses, "scripted responses");
  } else if (transport != "openai") {
    throw ConfigError("generation.transport must be \"openai\" or \"scripted\"");
  }
  if (!interp_scores.empty()) must_exist(interp_scores, "interp scores");
  if (frequency_bins < 1) throw ConfigError("frequency_bins must be >= 1");
  session_mix.validate();
}

nlohmann::json RunConfig::to_json(const fs::path& base) const {
  auto rel = [&](const fs::path& p) {
    if (p.empty() || base.empty()) return p.generic_string();
    return p.lexically_relative(base).generic_string();
  };
  nlohmann::json saes_j = nlohmann::json::array();
  for (const auto& s : saes) saes_j.push_back({{"id", s.id}, {"path", rel(s.path)}});
  return {{"corpus", {{"path", rel(corpus_path)}, {"format", saesens::to_string(corpus_format)}}},
          {"tokenizer", {{"vocab", rel(vocab_path)}}},
          {"saes", saes_j},
          {"backend", backend},
          {"backend_salt", backend_salt},
          {"seed", seed},
          {"sampling", {{"token_budget", token_budget}, {"seq_len", seq_len}}},
          {"features", {{"count", feature_count}, {"ids", feature_ids}}},
          {"filter", {{"min_examples", filter.min_examples}, {"truncation_cutoff", filter.truncation_rate}}},
          {"generation",
           {{"transport", transport},
            {"scripted_responses", rel(scripted_responses)},
            {"endpoint", llm_endpoint},
            {"model", generation.model},
            {"temperature", generation.temperature},
            {"max_tokens", generation.max_tokens},
            {"samples", generation.samples_requested},
            {"accept_count", generation.accept_count},
            {"min_usable", generation.min_usable},
            {"max_attempts", generation.max_attempts},
            {"retry_backoff_ms", generation.retry_backoff.count()},
            {"seed", generation.seed ? nlohmann::json(*generation.seed) : nlohmann::json(nullptr)}}},
          {"analysis",
           {{"interp_scores", rel(interp_scores)},
            {"frequency_bins", frequency_bins},
            {"overlap_max_n", overlap_max_n}}}};
}

// ---------------------------------------------------------------------------
// Manifest

const std::vector<std::string>& Manifest::stage_order() {
  static const std::vector<std::string> order = {"collect", "generate", "score", "analyze"};
  return order;
}

Manifest::Manifest(fs::path output_dir) : dir_(std::move(output_dir)) {
  const auto path = dir_ / "manifest.json";
  if (fs::exists(path)) {
    try {
      doc_ = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what(), e.byte);
    }
  } else {
    doc_ = {{"schema_version", 1}, {"stages", nlohmann::json::object()}};
  }
}

bool Manifest::has(const std::string& stage) const { return doc_.at("stages").contains(stage); }

void Manifest::require_before(const std::string& stage) const {
  const auto& order = stage_order();
  auto pos = std::find(order.begin(), order.end(), stage);
  if (pos == order.end()) throw ChainError("unknown stage: " + stage);
  for (auto it = order.begin(); it != pos; ++it) {
    if (!has(*it)) throw ChainError("run stage " + *it + " first");
    for (const auto& [rel, hash] : doc_.at("stages").at(*it).at("outputs").items()) {
      const auto file = dir_ / rel;
      if (!fs::exists(file) || sha256_file(file) != hash.get<std::string>()) {
        throw ChainError("output " + rel + " of stage " + *it + " is missing or modified; run stage " + *it +
                         " first");
      }
    }
  }
}

void Manifest::record(const std::string& stage, const std::map<std::string, std::string>& inputs,
                      const std::vector<fs::path>& outputs) {
  const auto& order = stage_order();
  auto pos = std::find(order.begin(), order.end(), stage);
  for (auto it = pos + 1; it != order.end(); ++it) doc_["stages"].erase(*it);
  nlohmann::json outs = nlohmann::json::object();
  for (const auto& p : outputs) outs[fs::relative(p, dir_).generic_string()] = sha256_file(p);
  doc_["stages"][stage] = {{"inputs", inputs}, {"outputs", outs}};
  nlohmann::json chain = nlohmann::json::array();
  for (const auto& s : order) {
    if (has(s)) chain.push_back(s);
  }
  doc_["chain"] = chain;
  save();
}

void Manifest::save() const { write_file_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Context

PipelineContext::PipelineContext(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  std::shared_ptr<RemoteBackend> probe;
  if (config_.backend != "synthetic") {
    RemoteBackendOptions opts;
    opts.url = config_.backend;
    probe = std::make_shared<RemoteBackend>(opts);
  }
  if (!config_.vocab_path.empty()) {
    tokenizer_ = std::make_shared<WhitespaceTokenizer>(WhitespaceTokenizer::from_file(config_.vocab_path));
  } else {
    tokenizer_ = probe->remote_tokenizer();
  }
  for (const auto& entry : config_.saes) {
    SaeModel model = load_sae(entry.path);
    std::unique_ptr<ActivationBackend> backend;
    if (config_.backend == "synthetic") {
      backend = std::make_unique<SyntheticBackend>(model.d_model, tokenizer_->id(), config_.backend_salt);
    } else {
      RemoteBackendOptions opts;
      opts.url = config_.backend;
      opts.d_model = model.d_model;
      opts.tokenizer_id = tokenizer_->id();
      backend = std::make_unique<RemoteBackend>(opts);
    }
    backends_[entry.id] = std::move(backend);
    saes_.emplace(entry.id, std::move(model));
  }
}

const SaeModel& PipelineContext::sae(const std::string& id) const {
  auto it = saes_.find(id);
  if (it == saes_.end()) throw NotFoundError("unknown SAE: " + id);
  return it->second;
}

const ActivationBackend& PipelineContext::backend(const std::string& sae_id) const {
  auto it = backends_.find(sae_id);
  if (it == backends_.end()) throw NotFoundError("unknown SAE: " + sae_id);
  return *it->second;
}

fs::path PipelineContext::sae_dir(const std::string& sae_id) const { return config_.output_dir / sae_id; }

LlmTransport& PipelineContext::transport() {
  if (!transport_) {
    std::shared_ptr<LlmTransport> t;
    if (config_.transport == "scripted") {
      t = ScriptedTransport::from_file(config_.scripted_responses);
    } else {
      OpenAiOptions opts;
      opts.endpoint = config_.llm_endpoint;
      opts.requests_per_minute = config_.requests_per_minute;
      t = std::make_shared<OpenAiTransport>(opts);
    }
    if (!config_.cache_dir.empty()) t = std::make_shared<CachingTransport>(t, config_.cache_dir);
    transport_ = std::move(t);
  }
  return *transport_;
}

// ---------------------------------------------------------------------------
// Artifact IO

std::vector<nlohmann::json> read_jsonl(const fs::path& file) {
  if (!fs::exists(file)) throw ChainError("missing artifact " + file.string());
  const std::string raw = read_file(file);
  std::vector<nlohmann::json> rows;
  std::size_t pos = 0;
  while (pos < raw.size()) {
    std::size_t nl = raw.find('\n', pos);
    if (nl == std::string::npos) nl = raw.size();
    if (nl > pos) {
      try {
        rows.push_back(nlohmann::json::parse(raw.begin() + static_cast<std::ptrdiff_t>(pos),
                                             raw.begin() + static_cast<std::ptrdiff_t>(nl)));
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(file.string() + ": " + e.what(), pos);
      }
    }
    pos = nl + 1;
  }
  return rows;
}

void write_jsonl(const fs::path& file, const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) out += r.dump() + "\n";
  fs::create_directories(file.parent_path());
  write_file_atomic(file, out);
}

std::vector<ExampleSet> read_example_sets(const fs::path& file) {
  std::vector<ExampleSet> out;
  for (const auto& j : read_jsonl(file)) out.push_back(example_set_from_json(j));
  return out;
}

std::vector<FilterVerdict> read_verdicts(const fs::path& file) {
  std::vector<FilterVerdict> out;
  for (const auto& j : read_jsonl(file)) out.push_back(filter_verdict_from_json(j));
  return out;
}

std::vector<GenerationResult> read_generations(const fs::path& file) {
  std::vector<GenerationResult> out;
  for (const auto& j : read_jsonl(file)) out.push_back(generation_result_from_json(j));
  return out;
}

std::vector<SensitivityRecord> read_sensitivity(const fs::path& file) {
  std::vector<SensitivityRecord> out;
  for (const auto& j : read_jsonl(file)) out.push_back(sensitivity_record_from_json(j));
  return out;
}

std::vector<UnevaluatedFeature> read_unevaluated(const fs::path& file) {
  std::vector<UnevaluatedFeature> out;
  for (const auto& j : read_jsonl(file)) {
    out.push_back({j.at("feature_id").get<FeatureId>(), j.at("reason").get<std::string>()});
  }
  return out;
}

std::vector<FeatureId> sample_feature_ids(std::size_t width, std::size_t count, std::uint64_t seed) {
  if (count >= width) {
    std::vector<FeatureId> all(width);
    std::iota(all.begin(), all.end(), FeatureId{0});
    return all;
  }
  // Partial Fisher-Yates over a sparse permutation.
  Rng rng(seed);
  std::map<std::size_t, std::size_t> swapped;
  auto at = [&](std::size_t i) {
    auto it = swapped.find(i);
    return it == swapped.end() ? i : it->second;
  };
  std::vector<FeatureId> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(width - i);
    const std::size_t vi = at(i), vj = at(j);
    swapped[i] = vj;
    swapped[j] = vi;
    out.push_back(static_cast<FeatureId>(vj));
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::map<std::string, std::string> base_inputs(const PipelineContext& ctx) {
  const auto& c = ctx.config();
  nlohmann::json cfg = c.to_json(c.source.empty() ? fs::path() : c.source.parent_path());
  std::map<std::string, std::string> in = {{"config", sha256_hex(cfg.dump())},
                                           {"corpus", sha256_file(c.corpus_path)},
                                           {"tokenizer", ctx.tokenizer()->id()}};
  for (const auto& s : c.saes) in["sae:" + s.id] = sha256_file(s.path);
  return in;
}

std::vector<FeatureId> selected_features(const PipelineContext& ctx, const std::string& sae_id) {
  const auto& c = ctx.config();
  const auto& model = ctx.sae(sae_id);
  if (!c.feature_ids.empty()) {
    std::vector<FeatureId> ids = c.feature_ids;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (FeatureId f : ids) {
      if (f >= model.width) {
        throw ConfigError("feature " + std::to_string(f) + " out of range for SAE " + sae_id);
      }
    }
    return ids;
  }
  return sample_feature_ids(model.width, c.feature_count,
                            derive_seed(derive_seed(c.seed, kSeedFeatures), string_key(sae_id)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages

StageResult run_collect(PipelineContext& ctx) {
  const auto& c = ctx.config();
  StageResult result;
  fs::create_directories(c.output_dir);
  Manifest manifest(c.output_dir);

  Corpus corpus = Corpus::open(c.corpus_path, c.corpus_format, ctx.tokenizer());
  const CorpusSample sample = sample_sequences(corpus, c.token_budget, c.seq_len, derive_seed(c.seed, kSeedCorpus));
  for (const auto& w : sample.warnings) {
    spdlog::warn("corpus sample: {}", w);
    result.notes.push_back(w);
  }
  spdlog::info("sampled {} sequences, {} tokens", sample.sequences.size(), sample.total_tokens);

  std::vector<fs::path> outputs;
  for (const auto& entry : c.saes) {
    const SaeModel& model = ctx.sae(entry.id);
    const ActivationBackend& backend = ctx.backend(entry.id);
    const auto features = selected_features(ctx, entry.id);
    spdlog::info("[{}] scanning {} features", entry.id, features.size());
    const auto scans = scan_sample(model, backend, sample, features, c.collector);

    std::vector<nlohmann::json> ex_rows, verdict_rows, metric_rows;
    std::size_t n_passed = 0;
    for (const auto& scan : scans) {
      ExampleSet set = select_examples(scan, derive_seed(c.seed, kSeedExamples), c.collector);
      const double rate = set.shown_count() ? truncation_activation_rate(model, backend, set) : 0.0;
      const FilterVerdict v = filter_feature(scan.feature_id, set.occurrence_count, rate, c.filter);
      n_passed += v.passed ? 1 : 0;
      nlohmann::json cosine = nullptr;
      try {
        cosine = max_decoder_cosine(model, scan.feature_id);
      } catch (const UndefinedMetricError& e) {
        spdlog::debug("[{}] feature {}: {}", entry.id, scan.feature_id, e.what());
      }
      metric_rows.push_back(
          {{"feature_id", scan.feature_id}, {"frequency", scan.frequency()}, {"max_decoder_cosine", cosine}});
      verdict_rows.push_back(to_json(v));
      ex_rows.push_back(to_json(set));
    }
    spdlog::info("[{}] {} of {} features passed filtering", entry.id, n_passed, scans.size());
    const auto dir = ctx.sae_dir(entry.id);
    write_jsonl(dir / "examples.jsonl", ex_rows);
    write_jsonl(dir / "verdicts.jsonl", verdict_rows);
    write_jsonl(dir / "metrics.jsonl", metric_rows);
    for (const char* f : {"examples.jsonl", "verdicts.jsonl", "metrics.jsonl"}) outputs.push_back(dir / f);
  }
  manifest.record("collect", base_inputs(ctx), outputs);
  return result;
}

StageResult run_generate(PipelineContext& ctx) {
  const auto& c = ctx.config();
  Manifest manifest(c.output_dir);
  manifest.require_before("generate");
  StageResult result;
  LlmTransport& transport = ctx.transport();

  std::vector<fs::path> outputs;
  std::int64_t prompt_tokens = 0, completion_tokens = 0, requests = 0;
  for (const auto& entry : c.saes) {
    const auto dir = ctx.sae_dir(entry.id);
    const auto sets = read_example_sets(dir / "examples.jsonl");
    const auto verdicts = read_verdicts(dir / "verdicts.jsonl");
    std::set<FeatureId> passed;
    for (const auto& v : verdicts) {
      if (v.passed) passed.insert(v.feature_id);
    }
    std::vector<PromptBundle> prompts;
    for (const auto& s : sets) {
      if (passed.count(s.feature_id)) prompts.push_back(build_prompt(s, c.generation));
    }
    spdlog::info("[{}] generating for {} features via {}", entry.id, prompts.size(), transport.describe());
    auto results = generate_all(prompts, transport, c.generation, ctx.tokenizer().get(), c.max_in_flight);
    std::vector<nlohmann::json> rows;
    std::size_t unevaluated = 0;
    for (const auto& r : results) {
      requests += r.attempts;
      prompt_tokens += r.provider_metadata.value("prompt_tokens", std::int64_t{0});
      completion_tokens += r.provider_metadata.value("completion_tokens", std::int64_t{0});
      if (!r.usable()) {
        ++unevaluated;
        spdlog::warn("[{}] feature {} unevaluated: {}", entry.id, r.feature_id, r.error);
      } else {
        spdlog::debug("[{}] feature {}: {} samples, {} attempt(s)", entry.id, r.feature_id, r.samples.size(),
                      r.attempts);
      }
      rows.push_back(to_json(r));
    }
    if (unevaluated > 0) {
      result.status = StageStatus::partial;
      result.notes.push_back(entry.id + ": " + std::to_string(unevaluated) + " feature(s) unevaluated");
    }
    write_jsonl(dir / "generations.jsonl", rows);
    outputs.push_back(dir / "generations.jsonl");
  }
  spdlog::info("LLM usage: {} requests, {} prompt tokens, {} completion tokens", requests, prompt_tokens,
               completion_tokens);

  auto inputs = base_inputs(ctx);
  inputs["prompt_template"] = prompt_template_hash();
  inputs["transport"] = transport.describe();
  if (c.transport == "scripted") inputs["scripted_responses"] = sha256_file(c.scripted_responses);
  manifest.record("generate", inputs, outputs);
  return result;
}

StageResult run_score(PipelineContext& ctx) {
  const auto& c = ctx.config();
  Manifest manifest(c.output_dir);
  manifest.require_before("score");
  StageResult result;
  std::vector<fs::path> outputs;
  for (const auto& entry : c.saes) {
    const auto dir = ctx.sae_dir(entry.id);
    const auto gens = read_generations(dir / "generations.jsonl");
    std::map<FeatureId, GenerationResult> by_id;
    std::vector<FeatureId> features;
    for (const auto& g : gens) {
      features.push_back(g.feature_id);
      by_id[g.feature_id] = g;
    }
    const ScoreRun run = score_run(ctx.sae(entry.id), ctx.backend(entry.id), *ctx.tokenizer(), features, by_id);
    std::vector<nlohmann::json> rec_rows, unev_rows;
    for (const auto& r : run.records) {
      if (r.partial()) result.status = StageStatus::partial;
      rec_rows.push_back(to_json(r));
    }
    for (const auto& u : run.unevaluated) unev_rows.push_back({{"feature_id", u.feature_id}, {"reason", u.reason}});
    if (!run.unevaluated.empty()) {
      result.status = StageStatus::partial;
      result.notes.push_back(entry.id + ": " + std::to_string(run.unevaluated.size()) + " feature(s) unevaluated");
    }
    spdlog::info("[{}] scored {} features, {} unevaluated", entry.id, run.records.size(), run.unevaluated.size());
    write_jsonl(dir / "sensitivity.jsonl", rec_rows);
    write_jsonl(dir / "unevaluated.jsonl", unev_rows);
    write_file_atomic(dir / "positions.json", to_json(position_stratified_rates(run.records)).dump(2) + "\n");
    for (const char* f : {"sensitivity.jsonl", "unevaluated.jsonl", "positions.json"}) outputs.push_back(dir / f);
  }
  manifest.record("score", base_inputs(ctx), outputs);
  return result;
}

namespace {

std::vector<OverlapStats> overlap_for(const std::vector<ExampleSet>& sets, const std::vector<GenerationResult>& gens,
                                      const std::set<FeatureId>& scored, const Tokenizer& tokenizer,
                                      std::size_t max_n) {
  std::map<FeatureId, const GenerationResult*> gen_by_id;
  for (const auto& g : gens) gen_by_id[g.feature_id] = &g;
  FeatureOverlap all;
  for (const auto& s : sets) {
    if (!scored.count(s.feature_id)) continue;
    auto git = gen_by_id.find(s.feature_id);
    if (git == gen_by_id.end()) continue;
    std::vector<std::vector<TokenId>> generated;
    for (const auto& g : git->second->samples) generated.push_back(tokenizer.encode(g.clean_text).ids);
    const auto shown = s.shown();
    const FeatureOverlap f = feature_overlap(shown, generated);
    all.activating_activating.insert(all.activating_activating.end(), f.activating_activating.begin(),
                                     f.activating_activating.end());
    all.generated_activating.insert(all.generated_activating.end(), f.generated_activating.begin(),
                                    f.generated_activating.end());
    all.generated_generated.insert(all.generated_generated.end(), f.generated_generated.begin(),
                                   f.generated_generated.end());
  }
  // Kinds without any pair (nothing scored) are left out of the report.
  std::vector<OverlapStats> out;
  const std::pair<const std::vector<std::size_t>*, OverlapKind> kinds[] = {
      {&all.activating_activating, OverlapKind::activating_activating},
      {&all.generated_activating, OverlapKind::generated_activating},
      {&all.generated_generated, OverlapKind::generated_generated}};
  for (const auto& [lengths, kind] : kinds) {
    if (!lengths->empty()) out.push_back(overlap_ccdf_from_lengths(*lengths, kind, max_n));
  }
  return out;
}

}  // namespace

StageResult run_analyze(PipelineContext& ctx) {
  const auto& c = ctx.config();
  Manifest manifest(c.output_dir);
  manifest.require_before("analyze");
  StageResult result;

  std::map<FeatureId, double> interp;
  if (!c.interp_scores.empty()) interp = read_interp_scores(c.interp_scores);

  struct Loaded {
    std::vector<ExampleSet> sets;
    std::vector<FilterVerdict> verdicts;
    std::vector<GenerationResult> gens;
    std::vector<SensitivityRecord> records;
    std::vector<UnevaluatedFeature> unevaluated;
    FeatureMetrics metrics;
  };
  std::map<std::string, Loaded> loaded;
  SaeFrequencies freqs;
  for (const auto& entry : c.saes) {
    const auto dir = ctx.sae_dir(entry.id);
    Loaded l;
    l.sets = read_example_sets(dir / "examples.jsonl");
    l.verdicts = read_verdicts(dir / "verdicts.jsonl");
    l.gens = read_generations(dir / "generations.jsonl");
    l.records = read_sensitivity(dir / "sensitivity.jsonl");
    l.unevaluated = read_unevaluated(dir / "unevaluated.jsonl");
    for (const auto& m : read_jsonl(dir / "metrics.jsonl")) {
      const auto f = m.at("feature_id").get<FeatureId>();
      l.metrics.frequency[f] = m.at("frequency").get<double>();
      if (!m.at("max_decoder_cosine").is_null()) l.metrics.max_cosine[f] = m.at("max_decoder_cosine").get<double>();
    }
    l.metrics.interp = interp;
    for (const auto& r : l.records) {
      const double f = l.metrics.frequency.at(r.feature_id);
      if (f > 0.0) freqs[entry.id][r.feature_id] = f;
    }
    loaded[entry.id] = std::move(l);
  }

  std::optional<FrequencyWeighting> weighting;
  if (freqs.size() >= 2) {
    try {
      weighting = build_frequency_weighting(freqs, c.frequency_bins);
    } catch (const Error& e) {
      spdlog::warn("frequency weighting skipped: {}", e.what());
      result.notes.push_back(std::string("frequency weighting skipped: ") + e.what());
    }
  } else {
    spdlog::info("frequency weighting needs scored features from at least 2 SAEs; skipped");
  }

  std::vector<fs::path> outputs;
  std::vector<SaeReport> reports;
  for (const auto& entry : c.saes) {
    const auto& l = loaded.at(entry.id);
    const SaeModel& model = ctx.sae(entry.id);
    std::set<FeatureId> scored;
    for (const auto& r : l.records) scored.insert(r.feature_id);
    AggregateInputs in;
    in.records = l.records;
    in.verdicts = l.verdicts;
    in.metrics = &l.metrics;
    if (weighting && weighting->weights.count(entry.id)) in.weights = &weighting->weights.at(entry.id);
    in.unevaluated = l.unevaluated;
    in.overlap = overlap_for(l.sets, l.gens, scored, *ctx.tokenizer(), c.overlap_max_n);
    SaeReport rep = aggregate_sae({entry.id, model.width, model.l0_label}, in);
    nlohmann::json j = to_json(rep);
    j["position_buckets"] = to_json(position_stratified_rates(l.records));
    j["target_positions"] = to_json(target_position_histogram(l.gens));
    if (!interp.empty()) {
      j["high_interp_low_sensitivity"] = interp_threshold_slice(l.records, interp, c.interp_threshold, 0.5);
    }
    const auto path = ctx.sae_dir(entry.id) / "report.json";
    write_file_atomic(path, j.dump(2) + "\n");
    outputs.push_back(path);
    reports.push_back(std::move(rep));
  }
  write_file_atomic(c.output_dir / "summary.csv", summary_csv(reports));
  write_file_atomic(c.output_dir / "summary.json", summary_json(reports).dump(2) + "\n");
  outputs.push_back(c.output_dir / "summary.csv");
  outputs.push_back(c.output_dir / "summary.json");
  if (weighting) {
    write_file_atomic(c.output_dir / "weighting.json", to_json(*weighting).dump(2) + "\n");
    outputs.push_back(c.output_dir / "weighting.json");
  }
  auto inputs = base_inputs(ctx);
  if (!c.interp_scores.empty()) inputs["interp_scores"] = sha256_file(c.interp_scores);
  manifest.record("analyze", inputs, outputs);
  return result;
}

Session run_session_build(PipelineContext& ctx, const std::string& session_id) {
  const auto& c = ctx.config();
  Manifest manifest(c.output_dir);
  manifest.require_before("analyze");
  if (c.interp_scores.empty()) throw ConfigError("session build needs analysis.interp_scores");
  const std::string sae_id = c.session_sae.empty() ? c.saes.front().id : c.session_sae;
  const auto dir = ctx.sae_dir(sae_id);
  const auto sets = read_example_sets(dir / "examples.jsonl");
  const auto gens = read_generations(dir / "generations.jsonl");
  const auto records = read_sensitivity(dir / "sensitivity.jsonl");
  std::map<FeatureId, FeatureArtifacts> arts;
  for (const auto& s : sets) {
    arts[s.feature_id].feature_id = s.feature_id;
    arts[s.feature_id].examples = &s;
  }
  for (const auto& g : gens) {
    arts[g.feature_id].feature_id = g.feature_id;
    arts[g.feature_id].generation = &g;
  }
  for (const auto& r : records) {
    arts[r.feature_id].feature_id = r.feature_id;
    arts[r.feature_id].record = &r;
  }
  std::vector<FeatureArtifacts> list;
  for (const auto& [f, a] : arts) list.push_back(a);
  SessionConfig sc;
  sc.n_items = c.session_items;
  sc.mix = c.session_mix;
  sc.seed = c.session_seed;
  sc.interp_threshold = c.interp_threshold;
  return build_session(session_id, list, read_interp_scores(c.interp_scores), sc);
}

}  // namespace saesens
