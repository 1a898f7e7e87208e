#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace saesens {

using TokenId = std::uint32_t;

struct Encoding {
  std::vector<TokenId> ids;
  std::vector<std::string> texts;  // display text per token, including any leading space
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  // Identifies the vocabulary; activations are only comparable between
  // sequences and backends that agree on it.
  virtual std::string id() const = 0;
  virtual Encoding encode(std::string_view text) const = 0;
  virtual std::vector<std::string> decode(std::span<const TokenId> ids) const = 0;
};

// Splits on spaces and tabs; each newline is its own token. Vocabulary file is
// UTF-8, one token per line, id = zero-based line number. A line holding the
// two characters `\n` denotes the newline token. Words missing from the
// vocabulary map to `<unk>` when the vocabulary has it, otherwise encode throws.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(std::vector<std::string> vocab, std::string name = "whitespace");

  static WhitespaceTokenizer from_file(const std::filesystem::path& path);

  std::string id() const override { return id_; }
  Encoding encode(std::string_view text) const override;
  std::vector<std::string> decode(std::span<const TokenId> ids) const override;

  std::optional<TokenId> lookup(std::string_view word) const;
  const std::string& token(TokenId id) const;
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  // Serialized vocabulary in the on-disk format.
  std::string to_vocab_file() const;

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  std::optional<TokenId> unk_;
  std::string id_;
};

}  // namespace saesens
