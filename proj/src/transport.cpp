#include <algorithm>
#include <atomic>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "saesens/error.hpp"
#include "saesens/generation.hpp"
#include "saesens/io.hpp"

namespace saesens {

nlohmann::json ChatRequest::body() const {
  nlohmann::json j = {{"model", model},
                      {"messages",
                       {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}}},
                      {"temperature", temperature},
                      {"max_tokens", max_tokens}};
  if (seed) j["seed"] = *seed;
  return j;
}

ChatRequest to_request(const PromptBundle& prompt) {
  ChatRequest r;
  r.model = prompt.model;
  r.system = prompt.system_text;
  r.user = prompt.user_text;
  r.temperature = prompt.temperature;
  r.max_tokens = prompt.max_tokens;
  r.seed = prompt.seed;
  return r;
}

RateLimiter::RateLimiter(double per_minute, double burst)
    : per_second_(per_minute / 60.0), burst_(std::max(1.0, burst)), tokens_(std::max(1.0, burst)),
      last_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
  if (per_second_ <= 0.0) return;
  std::unique_lock lock(mu_);
  for (;;) {
    const auto now = std::chrono::steady_clock::now();
    tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * per_second_);
    last_ = now;
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    const double wait = (1.0 - tokens_) / per_second_;
    lock.unlock();
    std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    lock.lock();
  }
}

namespace {

std::string redact(const std::string& key) {
  if (key.size() <= 8) return "****";
  return key.substr(0, 3) + "..." + key.substr(key.size() - 4);
}

}  // namespace

OpenAiTransport::OpenAiTransport(OpenAiOptions options)
    : options_(std::move(options)), limiter_(options_.requests_per_minute) {
  if (const char* key = std::getenv(options_.api_key_env.c_str()); key && *key) api_key_ = key;
  if (api_key_.empty()) throw ConfigError("environment variable " + options_.api_key_env + " is not set");
}

ChatResponse OpenAiTransport::complete(const ChatRequest& request, const RequestContext& context) {
  limiter_.acquire();
  httplib::Client client(options_.endpoint);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  client.set_bearer_token_auth(api_key_);
  const std::string body = request.body().dump();
  spdlog::debug("chat request feature={} attempt={} key={} body={}", context.feature_id, context.attempt,
                redact(api_key_), body);
  auto res = client.Post(options_.path, body, "application/json");
  if (!res) {
    throw TransportError("chat request failed: " + httplib::to_string(res.error()), 0, context.attempt, true);
  }
  spdlog::debug("chat response feature={} status={} body={}", context.feature_id, res->status, res->body);
  if (res->status != 200) {
    const bool retryable = res->status == 429 || res->status >= 500;
    throw TransportError("chat request returned HTTP " + std::to_string(res->status), res->status, context.attempt,
                         retryable);
  }
  try {
    const auto j = nlohmann::json::parse(res->body);
    ChatResponse out;
    out.content = j.at("choices").at(0).at("message").at("content").get<std::string>();
    out.usage = j.value("usage", nlohmann::json::object());
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed chat response: ") + e.what(), res->status, context.attempt, true);
  }
}

void ScriptedTransport::set(FeatureId feature, std::vector<Reply> replies) { replies_[feature] = std::move(replies); }

std::unique_ptr<ScriptedTransport> ScriptedTransport::from_json(const nlohmann::json& j) {
  auto parse_list = [](const nlohmann::json& arr) {
    std::vector<Reply> out;
    for (const auto& r : arr) {
      if (r.is_string()) {
        out.push_back({r.get<std::string>(), 200});
      } else {
        out.push_back({r.value("content", std::string()), r.value("status", 200)});
      }
    }
    return out;
  };
  auto t = std::make_unique<ScriptedTransport>();
  if (j.contains("responses")) {
    for (const auto& [key, arr] : j.at("responses").items()) {
      t->set(static_cast<FeatureId>(std::stoul(key)), parse_list(arr));
    }
  }
  if (j.contains("default")) t->set_default(parse_list(j.at("default")));
  return t;
}

std::unique_ptr<ScriptedTransport> ScriptedTransport::from_file(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("scripted responses " + path.string() + ": " + e.what(), e.byte);
  }
}

ChatResponse ScriptedTransport::complete(const ChatRequest&, const RequestContext& context) {
  {
    std::lock_guard lock(mu_);
    ++calls_;
  }
  auto it = replies_.find(context.feature_id);
  const auto& list = it != replies_.end() ? it->second : default_;
  if (list.empty()) {
    throw TransportError("no scripted reply for feature " + std::to_string(context.feature_id), 404, context.attempt,
                         false);
  }
  const auto idx = std::min(static_cast<std::size_t>(std::max(context.attempt, 1) - 1), list.size() - 1);
  const Reply& reply = list[idx];
  if (reply.status != 200) {
    throw TransportError("scripted failure HTTP " + std::to_string(reply.status), reply.status, context.attempt,
                         reply.status == 429 || reply.status >= 500);
  }
  return ChatResponse{reply.content, nlohmann::json::object(), false};
}

std::size_t ScriptedTransport::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

CachingTransport::CachingTransport(std::shared_ptr<LlmTransport> inner, std::filesystem::path dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string CachingTransport::cache_key(const ChatRequest& request, const RequestContext& context) {
  return sha256_hex(request.body().dump() + "\nattempt=" + std::to_string(context.attempt));
}

ChatResponse CachingTransport::complete(const ChatRequest& request, const RequestContext& context) {
  const std::string key = cache_key(request, context);
  const auto path = dir_ / key.substr(0, 2) / (key + ".json");
  if (std::filesystem::exists(path)) {
    try {
      const auto j = nlohmann::json::parse(read_file(path));
      ChatResponse r;
      r.content = j.at("content").get<std::string>();
      r.usage = j.value("usage", nlohmann::json::object());
      r.from_cache = true;
      return r;
    } catch (const nlohmann::json::exception&) {
      spdlog::warn("ignoring corrupt cache entry {}", path.string());
    }
  }
  ChatResponse r = inner_->complete(request, context);
  nlohmann::json j = {{"content", r.content}, {"usage", r.usage}, {"request", request.body()}};
  write_file_atomic(path, j.dump());
  return r;
}

GenerationResult generate(const PromptBundle& prompt, LlmTransport& transport, const GenerationSettings& settings,
                          const Tokenizer* tokenizer) {
  if (settings.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  const ChatRequest request = to_request(prompt);
  GenerationResult best;
  best.feature_id = prompt.feature_id;
  bool any_response = false;
  std::string last_error;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  int cached = 0;

  int attempt = 1;
  for (; attempt <= settings.max_attempts; ++attempt) {
    ChatResponse response;
    try {
      response = transport.complete(request, {prompt.feature_id, attempt});
    } catch (const TransportError& e) {
      last_error = e.what();
      spdlog::warn("feature {} attempt {}: {}", prompt.feature_id, attempt, e.what());
      if (!e.retryable()) break;
      if (attempt < settings.max_attempts && settings.retry_backoff.count() > 0) {
        std::this_thread::sleep_for(settings.retry_backoff * (1 << (attempt - 1)));
      }
      continue;
    }
    any_response = true;
    cached += response.from_cache ? 1 : 0;
    prompt_tokens += response.usage.value("prompt_tokens", std::int64_t{0});
    completion_tokens += response.usage.value("completion_tokens", std::int64_t{0});
    std::vector<GeneratedSample> samples;
    try {
      samples = parse_samples(response.content, tokenizer);
    } catch (const ParseError& e) {
      last_error = e.what();
    }
    if (samples.size() > best.samples.size() || best.samples.empty()) best.samples = std::move(samples);
    if (best.samples.size() >= settings.accept_count) break;
  }
  best.attempts = std::min(attempt, settings.max_attempts);
  best.provider_metadata = {{"transport", transport.describe()},
                            {"prompt_tokens", prompt_tokens},
                            {"completion_tokens", completion_tokens}};
  if (cached > 0) spdlog::debug("feature {}: {} response(s) served from cache", prompt.feature_id, cached);
  if (!any_response) {
    throw GenerationError("feature " + std::to_string(prompt.feature_id) + ": no successful response after " +
                          std::to_string(best.attempts) + " attempts: " + last_error);
  }
  if (best.samples.size() >= settings.accept_count) {
    best.status = GenerationStatus::ok;
  } else if (best.samples.size() >= settings.min_usable) {
    best.status = GenerationStatus::low_sample;
  } else {
    best.status = GenerationStatus::unevaluated;
    best.error = "only " + std::to_string(best.samples.size()) + " usable samples";
  }
  return best;
}

std::vector<GenerationResult> generate_all(std::span<const PromptBundle> prompts, LlmTransport& transport,
                                           const GenerationSettings& settings, const Tokenizer* tokenizer,
                                           std::size_t max_in_flight) {
  std::vector<GenerationResult> results(prompts.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < prompts.size(); i = next++) {
      try {
        results[i] = generate(prompts[i], transport, settings, tokenizer);
      } catch (const GenerationError& e) {
        results[i].feature_id = prompts[i].feature_id;
        results[i].status = GenerationStatus::unevaluated;
        results[i].attempts = settings.max_attempts;
        results[i].error = e.what();
      }
      spdlog::info("generated feature {}: {} samples ({})", prompts[i].feature_id, results[i].samples.size(),
                   to_string(results[i].status));
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(max_in_flight, prompts.size()));
  std::vector<std::jthread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  return results;
}

}  // namespace saesens
