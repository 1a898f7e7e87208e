#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/examples.hpp"
#include "saesens/tokenizer.hpp"

namespace saesens {

inline constexpr std::string_view kSampleSeparator = "<SAMPLE_SEPARATOR/>";

struct GenerationSettings {
  std::string model = "gpt-4.1-mini";
  double temperature = 1.0;
  int max_tokens = 2048;
  std::optional<std::int64_t> seed;
  std::size_t samples_requested = 11;  // the number written into the prompt
  std::size_t accept_count = 10;       // parsed samples needed to stop retrying
  std::size_t min_usable = 5;          // below this after retries: unevaluated
  int max_attempts = 3;
  // Sleep before retrying after a retryable transport error; doubles per attempt.
  std::chrono::milliseconds retry_backoff{1000};
};

struct PromptBundle {
  FeatureId feature_id = 0;
  std::string system_text;
  std::string user_text;
  std::size_t example_count = 0;
  std::string model;
  double temperature = 1.0;
  int max_tokens = 2048;
  std::optional<std::int64_t> seed;
};

// Character range [start, end) into GeneratedSample::clean_text.
struct TextSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const TextSpan&) const = default;
};

struct GeneratedSample {
  std::string raw_text;    // as returned, markers included
  std::string clean_text;  // markers removed, escapes decoded
  std::vector<TextSpan> target_spans;
  std::optional<std::size_t> first_target_token_index;  // tokens preceding the first target
};

enum class GenerationStatus { ok, low_sample, unevaluated };
std::string to_string(GenerationStatus s);
GenerationStatus parse_generation_status(const std::string& s);

struct GenerationResult {
  FeatureId feature_id = 0;
  std::vector<GeneratedSample> samples;
  int attempts = 0;
  GenerationStatus status = GenerationStatus::ok;
  std::string error;  // set when unevaluated
  nlohmann::json provider_metadata = nlohmann::json::object();

  bool usable() const { return status != GenerationStatus::unevaluated; }
};

std::string system_prompt_template();
// Template text with "{samples_requested}", "{example_count}" and "{examples}" placeholders.
std::string user_prompt_template();
std::string prompt_template_hash();

// Instantiates the generation prompt with every shown example (top then sampled).
PromptBundle build_prompt(const ExampleSet& examples, const GenerationSettings& settings = {});

// Splits on the sample separator, trims whitespace and enclosing quotes,
// drops empty segments, and extracts {{...}} targets. Unbalanced braces stay
// literal. `\n` and U+21B5 decode to newlines; `\{` and `\}` to braces.
// With a tokenizer, first_target_token_index = token count of the text
// before the first target. Throws ParseError if no sample survives.
std::vector<GeneratedSample> parse_samples(std::string_view response_text, const Tokenizer* tokenizer = nullptr);

// Parses one segment (no separators) into clean text and spans.
GeneratedSample parse_marked_text(std::string_view raw, const Tokenizer* tokenizer = nullptr);

// Re-inserts {{ }} around target spans and re-escapes newlines and braces.
std::string mark_text(std::string_view clean_text, std::span<const TextSpan> spans);

// ---------------------------------------------------------------------------
// Transport

struct ChatRequest {
  std::string model;
  std::string system;
  std::string user;
  double temperature = 1.0;
  int max_tokens = 2048;
  std::optional<std::int64_t> seed;

  // OpenAI-compatible chat-completions body.
  nlohmann::json body() const;
};

// Not sent on the wire; lets scripted transports and caches key on it.
struct RequestContext {
  FeatureId feature_id = 0;
  int attempt = 1;
};

struct ChatResponse {
  std::string content;
  nlohmann::json usage = nlohmann::json::object();
  bool from_cache = false;
};

class LlmTransport {
 public:
  virtual ~LlmTransport() = default;
  // Throws TransportError on failure. Must be safe to call concurrently.
  virtual ChatResponse complete(const ChatRequest& request, const RequestContext& context) = 0;
  virtual std::string describe() const = 0;
};

// Token bucket: `per_minute` requests per minute with bursts up to `burst`.
// A non-positive rate disables limiting.
class RateLimiter {
 public:
  explicit RateLimiter(double per_minute, double burst = 1.0);
  void acquire();

 private:
  std::mutex mu_;
  double per_second_;
  double burst_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

struct OpenAiOptions {
  std::string endpoint = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string api_key_env = "OPENAI_API_KEY";
  std::chrono::seconds timeout{120};
  double requests_per_minute = 0.0;
};

class OpenAiTransport final : public LlmTransport {
 public:
  explicit OpenAiTransport(OpenAiOptions options);
  ChatResponse complete(const ChatRequest& request, const RequestContext& context) override;
  std::string describe() const override { return "openai:" + options_.endpoint + options_.path; }

 private:
  OpenAiOptions options_;
  std::string api_key_;
  RateLimiter limiter_;
};

// Replays canned replies. Reply i is used for attempt i+1; the last reply
// repeats for later attempts. A reply is either response text or an HTTP
// status to fail with.
//
// File format: {"responses": {"<feature id>": [reply, ...]}, "default": [reply, ...]}
// where reply is a string or {"status": 500}.
class ScriptedTransport final : public LlmTransport {
 public:
  struct Reply {
    std::string content;
    int status = 200;
  };

  ScriptedTransport() = default;
  static std::unique_ptr<ScriptedTransport> from_file(const std::filesystem::path& path);
  static std::unique_ptr<ScriptedTransport> from_json(const nlohmann::json& j);

  void set(FeatureId feature, std::vector<Reply> replies);
  void set_default(std::vector<Reply> replies) { default_ = std::move(replies); }

  ChatResponse complete(const ChatRequest& request, const RequestContext& context) override;
  std::string describe() const override { return "scripted"; }
  std::size_t calls() const;

 private:
  std::map<FeatureId, std::vector<Reply>> replies_;
  std::vector<Reply> default_;
  mutable std::mutex mu_;
  std::size_t calls_ = 0;
};

// Content-addressed on-disk cache in front of another transport. The key is
// the SHA-256 of the request body plus the attempt number, so retries issue
// fresh requests while reruns replay.
class CachingTransport final : public LlmTransport {
 public:
  CachingTransport(std::shared_ptr<LlmTransport> inner, std::filesystem::path dir);
  ChatResponse complete(const ChatRequest& request, const RequestContext& context) override;
  std::string describe() const override { return "cached(" + inner_->describe() + ")"; }

  static std::string cache_key(const ChatRequest& request, const RequestContext& context);

 private:
  std::shared_ptr<LlmTransport> inner_;
  std::filesystem::path dir_;
};

ChatRequest to_request(const PromptBundle& prompt);

// One request per attempt until accept_count samples parse. Throws
// GenerationError if every attempt fails at the transport level. Otherwise
// keeps the attempt with the most samples: ok, low_sample (>= min_usable) or
// unevaluated.
GenerationResult generate(const PromptBundle& prompt, LlmTransport& transport, const GenerationSettings& settings = {},
                          const Tokenizer* tokenizer = nullptr);

// Runs generate() for every prompt with at most `max_in_flight` concurrent
// requests. Transport failures become unevaluated results. Output order
// matches `prompts`.
std::vector<GenerationResult> generate_all(std::span<const PromptBundle> prompts, LlmTransport& transport,
                                           const GenerationSettings& settings, const Tokenizer* tokenizer,
                                           std::size_t max_in_flight = 4);

struct TargetPositionHistogram {
  std::map<std::size_t, std::size_t> counts;  // preceding-token count -> samples
  std::size_t marked = 0;
  std::size_t unmarked = 0;
  double fraction_at_zero = 0.0;   // of marked samples
  double fraction_le_five = 0.0;   // of marked samples
};

TargetPositionHistogram target_position_histogram(std::span<const GenerationResult> results);

nlohmann::json to_json(const GeneratedSample& s);
GeneratedSample generated_sample_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerationResult& r);
GenerationResult generation_result_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TargetPositionHistogram& h);

}  // namespace saesens
