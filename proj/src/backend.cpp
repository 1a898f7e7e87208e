#include "saesens/backend.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "saesens/error.hpp"
#include "saesens/io.hpp"
#include "saesens/rng.hpp"

namespace saesens {

SyntheticBackend::SyntheticBackend(std::size_t d_model, std::string tokenizer_id, std::uint64_t salt)
    : d_model_(d_model), tokenizer_id_(std::move(tokenizer_id)), salt_(salt) {
  if (d_model_ == 0) throw ConfigError("synthetic backend needs d_model > 0");
}

std::vector<float> SyntheticBackend::embedding(TokenId token) const {
  Rng rng(derive_seed(salt_, token));
  std::vector<double> v(d_model_);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  std::vector<float> out(d_model_);
  for (std::size_t i = 0; i < d_model_; ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

Matrix SyntheticBackend::activations(std::span<const TokenId> tokens) const {
  Matrix m(tokens.size(), d_model_);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto e = embedding(tokens[t]);
    std::copy(e.begin(), e.end(), m.row(t).begin());
  }
  return m;
}

namespace {

struct ParsedUrl {
  std::string scheme_host_port;
  std::string base_path;
};

ParsedUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string base = url.substr(path_start);
  while (!base.empty() && base.back() == '/') base.pop_back();
  return {url.substr(0, path_start), base};
}

}  // namespace

RemoteBackend::RemoteBackend(RemoteBackendOptions options) : options_(std::move(options)) {
  if (options_.url.empty()) throw ConfigError("remote backend needs a URL");
  if (options_.max_attempts < 1) throw ConfigError("remote backend max_attempts must be >= 1");
}

std::string RemoteBackend::post(const std::string& path, const std::string& body) const {
  const auto url = split_url(options_.url);
  httplib::Client client(url.scheme_host_port);
  client.set_connection_timeout(options_.timeout);
  client.set_read_timeout(options_.timeout);
  httplib::Headers headers;
  if (const char* token = std::getenv(options_.token_env.c_str()); token && *token) {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  int last_status = 0;
  std::string last_error;
  for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
    auto res = client.Post(url.base_path + path, headers, body, "application/json");
    if (res && res->status == 200) return res->body;
    bool retryable = true;
    if (res) {
      last_status = res->status;
      last_error = "HTTP " + std::to_string(res->status);
      retryable = res->status == 429 || res->status >= 500;
    } else {
      last_status = 0;
      last_error = httplib::to_string(res.error());
    }
    if (!retryable) {
      throw TransportError("activation backend " + path + " failed: " + last_error, last_status, attempt, false);
    }
    if (attempt < options_.max_attempts) std::this_thread::sleep_for(options_.backoff * attempt);
  }
  throw TransportError("activation backend " + path + " failed after " + std::to_string(options_.max_attempts) +
                           " attempts: " + last_error,
                       last_status, options_.max_attempts, true);
}

Matrix RemoteBackend::activations(std::span<const TokenId> tokens) const {
  nlohmann::json req = {{"token_ids", std::vector<TokenId>(tokens.begin(), tokens.end())}};
  const std::string body = post("/activations", req.dump());
  nlohmann::json res;
  try {
    res = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw TransportError(std::string("malformed backend response: ") + e.what(), 200, 1, false);
  }
  const auto tok = res.value("tokenizer_id", std::string());
  if (!options_.tokenizer_id.empty() && tok != options_.tokenizer_id) {
    throw ConfigError("backend tokenizer '" + tok + "' does not match expected '" + options_.tokenizer_id + "'");
  }
  const auto shape = res.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2 || shape[0] != tokens.size()) {
    throw ShapeError("backend returned shape that does not match " + std::to_string(tokens.size()) + " tokens");
  }
  if (options_.d_model != 0 && shape[1] != options_.d_model) {
    throw ShapeError("backend returned d_model " + std::to_string(shape[1]) + ", expected " +
                     std::to_string(options_.d_model));
  }
  const auto bytes = base64_decode(res.at("data").get<std::string>());
  if (bytes.size() != shape[0] * shape[1] * sizeof(float)) throw ShapeError("backend payload size mismatch");
  std::vector<float> data(shape[0] * shape[1]);
  std::memcpy(data.data(), bytes.data(), bytes.size());
  return Matrix(shape[0], shape[1], std::move(data));
}

namespace {

class RemoteTokenizer final : public Tokenizer {
 public:
  RemoteTokenizer(std::string id, std::function<std::string(const std::string&)> post)
      : id_(std::move(id)), post_(std::move(post)) {}

  std::string id() const override { return id_; }

  Encoding encode(std::string_view text) const override {
    const auto res = nlohmann::json::parse(post_(nlohmann::json{{"text", std::string(text)}}.dump()));
    Encoding enc;
    enc.ids = res.at("token_ids").get<std::vector<TokenId>>();
    enc.texts = res.at("texts").get<std::vector<std::string>>();
    if (enc.ids.size() != enc.texts.size()) throw ShapeError("remote tokenizer returned mismatched ids/texts");
    return enc;
  }

  std::vector<std::string> decode(std::span<const TokenId> ids) const override {
    const auto res = nlohmann::json::parse(
        post_(nlohmann::json{{"token_ids", std::vector<TokenId>(ids.begin(), ids.end())}}.dump()));
    return res.at("texts").get<std::vector<std::string>>();
  }

 private:
  std::string id_;
  std::function<std::string(const std::string&)> post_;
};

}  // namespace

std::shared_ptr<Tokenizer> RemoteBackend::remote_tokenizer() const {
  return std::make_shared<RemoteTokenizer>(options_.tokenizer_id,
                                           [this](const std::string& body) { return post("/tokenize", body); });
}

FeatureActivations feature_activation_on_sequence(const SaeModel& model, const ActivationBackend& backend,
                                                  const TokenSequence& seq, std::span<const FeatureId> feature_ids) {
  if (backend.d_model() != model.d_model) {
    throw ConfigError("backend d_model " + std::to_string(backend.d_model()) + " != SAE d_model " +
                      std::to_string(model.d_model));
  }
  if (!seq.tokenizer_id.empty() && !backend.tokenizer_id().empty() && seq.tokenizer_id != backend.tokenizer_id()) {
    throw ConfigError("sequence tokenized with '" + seq.tokenizer_id + "' but backend expects '" +
                      backend.tokenizer_id() + "'");
  }
  if (feature_ids.empty()) {
    FeatureActivations empty;
    empty.values = Matrix(seq.tokens.size(), 0);
    return empty;
  }
  return encode_features(model, backend.activations(seq.tokens), feature_ids);
}

std::vector<double> feature_frequency(const SaeModel& model, const ActivationBackend& backend,
                                      const CorpusSample& sample, std::span<const FeatureId> feature_ids) {
  if (sample.sequences.empty()) throw PreconditionError("feature_frequency needs a non-empty sample");
  std::vector<std::size_t> counts(feature_ids.size(), 0);
  std::size_t total = 0;
  for (const auto& seq : sample.sequences) {
    const auto acts = feature_activation_on_sequence(model, backend, seq, feature_ids);
    for (std::size_t t = 0; t < acts.values.rows(); ++t) {
      for (std::size_t c = 0; c < feature_ids.size(); ++c) counts[c] += acts.active(t, c) ? 1 : 0;
    }
    total += seq.tokens.size();
  }
  std::vector<double> freq(feature_ids.size());
  for (std::size_t c = 0; c < counts.size(); ++c) freq[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return freq;
}

SaeModel build_lexical_sae(const SyntheticBackend& backend, std::span<const TokenId> detector_tokens,
                           std::size_t vocab_size, float threshold) {
  const std::size_t d = backend.d_model();
  SaeModel m;
  m.variant = SaeVariant::relu;
  m.width = detector_tokens.size();
  m.d_model = d;
  m.w_enc = Matrix(m.width, d);
  m.w_dec = Matrix(m.width, d);
  m.b_enc.assign(m.width, -threshold);
  m.b_dec.assign(d, 0.0f);
  m.l0_label = "lexical";
  std::vector<std::vector<float>> vocab_emb(vocab_size);
  for (TokenId t = 0; t < vocab_size; ++t) vocab_emb[t] = backend.embedding(t);
  for (std::size_t f = 0; f < m.width; ++f) {
    const TokenId target = detector_tokens[f];
    if (target >= vocab_size) throw ConfigError("detector token outside vocabulary");
    const auto& e = vocab_emb[target];
    std::copy(e.begin(), e.end(), m.w_enc.row(f).begin());
    std::copy(e.begin(), e.end(), m.w_dec.row(f).begin());
    for (TokenId t = 0; t < vocab_size; ++t) {
      if (t == target) continue;
      double acc = 0.0;
      for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(e[i]) * vocab_emb[t][i];
      if (acc - threshold > 0.0) {
        throw ConfigError("token " + std::to_string(t) + " would activate the detector for token " +
                          std::to_string(target) + "; raise d_model or the threshold");
      }
    }
  }
  m.validate();
  return m;
}

}  // namespace saesens
