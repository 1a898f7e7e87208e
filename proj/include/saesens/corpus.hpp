#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/tokenizer.hpp"

namespace saesens {

// A tokenized span of text; the unit that scanning and scoring operate on.
struct TokenSequence {
  std::vector<TokenId> tokens;
  std::vector<std::string> texts;
  std::string source_id;
  std::size_t offset = 0;    // start position in the source document, in tokens
  std::string tokenizer_id;  // empty when provenance is unknown

  void validate() const;
  std::size_t size() const { return tokens.size(); }
};

struct Document {
  std::string source_id;
  std::vector<TokenId> tokens;
  std::vector<std::string> texts;
};

enum class CorpusFormat {
  text_lines,   // UTF-8, one document per line
  text_blocks,  // UTF-8, documents separated by blank lines
  token_ids,    // binary, see below
};

CorpusFormat parse_corpus_format(const std::string& name);
std::string to_string(CorpusFormat format);

// Binary token-id corpus layout (all integers little-endian):
//   bytes [0, 8)        magic "SAETOKS1"
//   bytes [8, 16)       u64 document count N
//   next 8*N bytes      u64 length of each document, in tokens
//   remainder           u32 token ids, documents concatenated in order
// The file size must match the header exactly.
inline constexpr char kTokenCorpusMagic[8] = {'S', 'A', 'E', 'T', 'O', 'K', 'S', '1'};

void write_token_corpus(const std::filesystem::path& path,
                        const std::vector<std::vector<TokenId>>& documents);

class Corpus;

// Independent forward cursor over a corpus. Each cursor owns its own file handle.
class DocumentCursor {
 public:
  std::optional<Document> next();

 private:
  friend class Corpus;
  explicit DocumentCursor(const Corpus& corpus);

  const Corpus* corpus_;
  std::ifstream in_;
  std::size_t index_ = 0;
  std::size_t byte_offset_ = 0;
};

// Read-only handle to an opened corpus. Cheap to copy.
class Corpus {
 public:
  // The tokenizer encodes text corpora and decodes id corpora. It may be null
  // for id corpora, in which case token texts are the decimal ids.
  static Corpus open(const std::filesystem::path& path, CorpusFormat format,
                     std::shared_ptr<const Tokenizer> tokenizer);

  DocumentCursor cursor() const { return DocumentCursor(*this); }
  const std::filesystem::path& path() const { return path_; }
  CorpusFormat format() const { return format_; }
  const Tokenizer* tokenizer() const { return tokenizer_.get(); }
  std::string tokenizer_id() const { return tokenizer_ ? tokenizer_->id() : std::string(); }

 private:
  friend class DocumentCursor;

  std::filesystem::path path_;
  CorpusFormat format_ = CorpusFormat::text_lines;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::shared_ptr<const std::vector<std::uint64_t>> doc_lengths_;  // id corpora only
};

struct CorpusSample {
  std::vector<TokenSequence> sequences;
  std::size_t total_tokens = 0;
  std::uint64_t seed = 0;
  std::size_t seq_len = 0;
  std::size_t token_budget = 0;
  std::vector<std::string> warnings;  // e.g. corpus smaller than the budget

  bool partial() const { return !warnings.empty(); }
};

// Draws floor(token_budget / seq_len) windows of exactly seq_len tokens,
// without replacement, from chunk positions aligned to seq_len inside each
// document. Trailing remainders shorter than seq_len are never used. Output is
// ordered by (document, chunk) and is a pure function of the inputs.
CorpusSample sample_sequences(const Corpus& corpus, std::size_t token_budget, std::size_t seq_len,
                              std::uint64_t seed);

nlohmann::json to_json(const TokenSequence& seq);
TokenSequence token_sequence_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CorpusSample& sample);
CorpusSample corpus_sample_from_json(const nlohmann::json& j);

}  // namespace saesens
