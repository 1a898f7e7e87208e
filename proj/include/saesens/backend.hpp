#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "saesens/corpus.hpp"
#include "saesens/sae.hpp"
#include "saesens/tokenizer.hpp"

namespace saesens {

// Provider of per-token model activations (T x d_model) for a token sequence.
// Implementations must be safe to call concurrently.
class ActivationBackend {
 public:
  virtual ~ActivationBackend() = default;

  virtual std::string name() const = 0;
  virtual std::size_t d_model() const = 0;
  virtual std::string tokenizer_id() const = 0;
  // Non-deterministic backends are rejected for scoring runs.
  virtual bool deterministic() const { return true; }
  virtual Matrix activations(std::span<const TokenId> tokens) const = 0;
};

// Every token id maps to a fixed pseudo-random unit vector, independent of
// position and context, so lexical ground-truth features can be built by hand.
class SyntheticBackend final : public ActivationBackend {
 public:
  SyntheticBackend(std::size_t d_model, std::string tokenizer_id, std::uint64_t salt = 0);

  std::string name() const override { return "synthetic"; }
  std::size_t d_model() const override { return d_model_; }
  std::string tokenizer_id() const override { return tokenizer_id_; }
  Matrix activations(std::span<const TokenId> tokens) const override;

  std::vector<float> embedding(TokenId token) const;

 private:
  std::size_t d_model_;
  std::string tokenizer_id_;
  std::uint64_t salt_;
};

struct RemoteBackendOptions {
  std::string url;                        // e.g. http://localhost:8000
  std::size_t d_model = 0;                // expected width of returned rows
  std::string tokenizer_id;               // expected; empty accepts the server's
  std::string token_env = "SAESENS_BACKEND_TOKEN";
  int max_attempts = 3;
  std::chrono::milliseconds backoff{250};
  std::chrono::seconds timeout{60};
};

// Client for `POST /activations`.
//   request:  {"token_ids": [..]}
//   response: {"tokenizer_id": str, "shape": [T, d_model],
//              "data": base64 of little-endian float32, row-major}
// Optional `POST /tokenize` ({"text": str} -> {"token_ids": [..], "texts": [..]})
// backs remote_tokenizer(). Bearer token is read from `token_env` when set.
class RemoteBackend final : public ActivationBackend {
 public:
  explicit RemoteBackend(RemoteBackendOptions options);

  std::string name() const override { return "remote:" + options_.url; }
  std::size_t d_model() const override { return options_.d_model; }
  std::string tokenizer_id() const override { return options_.tokenizer_id; }
  Matrix activations(std::span<const TokenId> tokens) const override;

  std::shared_ptr<Tokenizer> remote_tokenizer() const;

 private:
  std::string post(const std::string& path, const std::string& body) const;

  RemoteBackendOptions options_;
};

// Activations of the selected features on one sequence.
FeatureActivations feature_activation_on_sequence(const SaeModel& model, const ActivationBackend& backend,
                                                  const TokenSequence& seq, std::span<const FeatureId> feature_ids);

// Fraction of scanned tokens with activation > 0, per requested feature.
std::vector<double> feature_frequency(const SaeModel& model, const ActivationBackend& backend,
                                      const CorpusSample& sample, std::span<const FeatureId> feature_ids);

// Builds a ReLU SAE whose feature i fires exactly on `detector_tokens[i]`
// under the given synthetic backend: encoder row = that token's embedding,
// bias = -threshold. Decoder rows copy the encoder rows. Throws ConfigError
// if any vocabulary token other than the detector would cross the threshold.
SaeModel build_lexical_sae(const SyntheticBackend& backend, std::span<const TokenId> detector_tokens,
                           std::size_t vocab_size, float threshold = 0.5f);

}  // namespace saesens
