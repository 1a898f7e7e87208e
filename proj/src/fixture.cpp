#include "saesens/fixture.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "saesens/backend.hpp"
#include "saesens/error.hpp"
#include "saesens/generation.hpp"
#include "saesens/io.hpp"
#include "saesens/rng.hpp"

namespace saesens {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> make_words(std::size_t n, Rng& rng) {
  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  std::vector<std::string> syllables;
  for (char c : consonants) {
    for (char v : vowels) syllables.push_back(std::string{c, v});
  }
  std::vector<std::string> words;
  for (const auto& a : syllables) {
    for (const auto& b : syllables) words.push_back(a + b);
  }
  for (std::size_t i = words.size(); i > 1; --i) std::swap(words[i - 1], words[rng.below(i)]);
  if (n > words.size()) throw ConfigError("fixture vocabulary too large");
  words.resize(n);
  return words;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

FixtureInfo write_fixture(const fs::path& dir, const FixtureOptions& o) {
  if (o.n_detectors < 8 || o.n_rare >= o.n_detectors) throw ConfigError("fixture needs at least 8 detectors");
  fs::create_directories(dir);
  Rng rng(o.seed);
  FixtureInfo info;
  info.dir = dir;

  std::vector<std::string> vocab = {"<unk>"};
  for (auto& w : make_words(o.vocab_words, rng)) vocab.push_back(std::move(w));
  WhitespaceTokenizer tok(vocab);
  info.vocab = dir / "vocab.txt";
  write_file_atomic(info.vocab, tok.to_vocab_file());
  // Reload so the id reflects the file on disk.
  auto tokenizer = WhitespaceTokenizer::from_file(info.vocab);

  // Detectors of the first SAE; later SAEs reuse half of them and swap in new words.
  std::vector<TokenId> pool;
  for (TokenId t = 1; t < vocab.size(); ++t) pool.push_back(t);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  const std::vector<TokenId> primary(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(o.n_detectors));
  std::set<TokenId> detector_set(primary.begin(), primary.end());
  std::vector<TokenId> filler;
  for (TokenId t = 1; t < vocab.size(); ++t) {
    if (!detector_set.count(t)) filler.push_back(t);
  }

  SyntheticBackend backend(o.d_model, tokenizer.id(), 0);
  for (std::size_t s = 0; s < o.n_saes; ++s) {
    FixtureSae sae;
    sae.id = std::string("lex-") + static_cast<char>('a' + s);
    sae.detectors = primary;
    if (s > 0) {
      // Odd features detect a different (filler) word, so this SAE scores lower.
      for (std::size_t i = 1; i < sae.detectors.size(); i += 2) {
        sae.detectors[i] = filler[(s * 31 + i * 7) % filler.size()];
      }
    }
    SaeModel model = build_lexical_sae(backend, sae.detectors, vocab.size(), 0.5f);
    model.l0_label = "1";
    sae.path = dir / (sae.id + ".safetensors");
    save_sae(sae.path, model);
    info.saes.push_back(std::move(sae));
  }

  // Corpus: filler documents with detector words planted in a chosen number of documents.
  std::vector<std::vector<TokenId>> docs(o.n_docs, std::vector<TokenId>(o.doc_len));
  for (auto& d : docs) {
    for (auto& t : d) t = filler[rng.below(filler.size())];
  }
  for (std::size_t i = 0; i < o.n_detectors; ++i) {
    const bool rare = i >= o.n_detectors - o.n_rare;
    const std::size_t n_docs = rare ? 3 + rng.below(10) : 16 + rng.below(o.n_docs / 2);
    std::vector<std::size_t> order(o.n_docs);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
    for (std::size_t k = 0; k < std::min(n_docs, order.size()); ++k) {
      auto& d = docs[order[k]];
      const std::size_t copies = 1 + rng.below(2);
      for (std::size_t c = 0; c < copies; ++c) d[rng.below(d.size())] = primary[i];
    }
  }
  std::string corpus;
  for (const auto& d : docs) {
    std::vector<std::string> words;
    for (TokenId t : d) words.push_back(vocab[t]);
    corpus += join(words) + "\n";
  }
  info.corpus = dir / "corpus.txt";
  write_file_atomic(info.corpus, corpus);

  // Scripted replies keyed by feature id, written against the first SAE's detectors.
  info.failing_feature = 2;
  info.retry_feature = 5;
  info.low_sample_feature = 7;
  auto sample_text = [&](TokenId target, bool include, bool mark, std::size_t pos) {
    const std::size_t len = 8 + rng.below(10);
    std::vector<std::string> words;
    for (std::size_t k = 0; k < len; ++k) words.push_back(vocab[filler[rng.below(filler.size())]]);
    const std::size_t p = std::min(pos, len - 1);
    if (include) words[p] = vocab[target];
    if (mark) words[p] = "{{" + words[p] + "}}";
    return join(words);
  };
  auto reply = [&](FeatureId f, std::size_t n_samples) {
    const TokenId target = primary[f];
    const std::size_t n_missing = f % 5;  // samples that drift away from the feature
    std::string text;
    for (std::size_t k = 0; k < n_samples; ++k) {
      const bool include = k >= n_missing;
      // One in four drifting samples still carries the word, unmarked.
      const bool hidden = !include && (k % 4 == 3);
      text += std::string(kSampleSeparator) + "\n" +
              sample_text(target, include || hidden, include, rng.below(14)) + "\n\n";
    }
    return text;
  };
  nlohmann::json responses = nlohmann::json::object();
  for (FeatureId f = 0; f < o.n_detectors; ++f) {
    nlohmann::json list = nlohmann::json::array();
    if (f == info.failing_feature) {
      list.push_back({{"status", 500}});
    } else if (f == info.retry_feature) {
      list.push_back(reply(f, 3));
      list.push_back(reply(f, 11));
    } else if (f == info.low_sample_feature) {
      list.push_back(reply(f, 7));
    } else {
      list.push_back(reply(f, 11));
    }
    responses[std::to_string(f)] = list;
  }
  info.responses = dir / "responses.json";
  write_file_atomic(info.responses, nlohmann::json({{"responses", responses}}).dump(2) + "\n");

  std::string interp = "feature_id,score\n";
  for (FeatureId f = 0; f < o.n_detectors; ++f) {
    const double score = 0.70 + 0.02 * static_cast<double>((f * 7) % 15);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%u,%.2f\n", f, score);
    interp += buf;
  }
  info.interp = dir / "interp.csv";
  write_file_atomic(info.interp, interp);

  nlohmann::json saes = nlohmann::json::array();
  for (const auto& s : info.saes) saes.push_back({{"id", s.id}, {"path", s.path.filename().string()}});
  nlohmann::json config = {
      {"corpus", {{"path", "corpus.txt"}, {"format", "text_lines"}}},
      {"tokenizer", {{"vocab", "vocab.txt"}}},
      {"saes", saes},
      {"backend", "synthetic"},
      {"seed", o.seed},
      {"sampling", {{"token_budget", o.n_docs * o.doc_len}, {"seq_len", o.doc_len}}},
      {"features", {{"count", o.n_detectors}}},
      {"filter", {{"min_examples", 15}, {"truncation_cutoff", 0.9}}},
      {"generation",
       {{"transport", "scripted"}, {"scripted_responses", "responses.json"},
        {"max_in_flight", 4},
        {"retry_backoff_ms", 0}}},
      {"analysis", {{"interp_scores", "interp.csv"}}},
      {"annotation", {{"n_items", 10}, {"mix", "0.2,0.2,0.6"}, {"seed", 1}}},
      {"output_dir", "out"}};
  info.config = dir / "config.json";
  write_file_atomic(info.config, config.dump(2) + "\n");
  return info;
}

}  // namespace saesens
