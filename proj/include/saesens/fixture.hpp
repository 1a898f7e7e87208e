#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "saesens/sae.hpp"
#include "saesens/tokenizer.hpp"

namespace saesens {

// A self-contained synthetic run: vocabulary, text corpus, lexical-detector
// SAEs under the synthetic backend, scripted LLM replies, interp scores and
// a config tying them together.
struct FixtureOptions {
  std::uint64_t seed = 7;
  std::size_t d_model = 128;
  std::size_t vocab_words = 199;  // plus <unk>
  std::size_t n_detectors = 20;
  std::size_t n_rare = 4;  // detectors planted in fewer than 15 sequences
  std::size_t n_docs = 60;
  std::size_t doc_len = 64;
  std::size_t n_saes = 2;
};

struct FixtureSae {
  std::string id;
  std::filesystem::path path;
  std::vector<TokenId> detectors;  // feature i fires on detectors[i]
};

struct FixtureInfo {
  std::filesystem::path dir;
  std::filesystem::path config;
  std::filesystem::path vocab;
  std::filesystem::path corpus;
  std::filesystem::path responses;
  std::filesystem::path interp;
  std::vector<FixtureSae> saes;
  FeatureId failing_feature = 0;     // every attempt returns HTTP 500
  FeatureId retry_feature = 0;       // first reply too short, second complete
  FeatureId low_sample_feature = 0;  // always fewer than accept_count samples
};

FixtureInfo write_fixture(const std::filesystem::path& dir, const FixtureOptions& options = {});

}  // namespace saesens
