#include "saesens/tokenizer.hpp"

#include "saesens/error.hpp"
#include "saesens/io.hpp"

namespace saesens {

WhitespaceTokenizer::WhitespaceTokenizer(std::vector<std::string> vocab, std::string name)
    : vocab_(std::move(vocab)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto& tok = vocab_[i];
    if (tok.empty()) throw FormatError("empty vocabulary entry on line " + std::to_string(i + 1), 0);
    if (!index_.emplace(tok, static_cast<TokenId>(i)).second) {
      throw FormatError("duplicate vocabulary entry '" + tok + "'", 0);
    }
  }
  if (auto it = index_.find("<unk>"); it != index_.end()) unk_ = it->second;
  id_ = name + ":" + sha256_hex(to_vocab_file()).substr(0, 16);
}

WhitespaceTokenizer WhitespaceTokenizer::from_file(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  std::vector<std::string> vocab;
  std::size_t start = 0;
  while (start < raw.size()) {
    std::size_t end = raw.find('\n', start);
    if (end == std::string::npos) end = raw.size();
    std::string line = raw.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw FormatError("empty vocabulary line in " + path.string(), start);
    vocab.push_back(line == "\\n" ? std::string("\n") : std::move(line));
    start = end + 1;
  }
  return WhitespaceTokenizer(std::move(vocab));
}

std::string WhitespaceTokenizer::to_vocab_file() const {
  std::string out;
  for (const auto& tok : vocab_) {
    out += tok == "\n" ? std::string("\\n") : tok;
    out += '\n';
  }
  return out;
}

std::optional<TokenId> WhitespaceTokenizer::lookup(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& WhitespaceTokenizer::token(TokenId id) const {
  if (id >= vocab_.size()) throw ValidationError("token id " + std::to_string(id) + " out of vocabulary");
  return vocab_[id];
}

Encoding WhitespaceTokenizer::encode(std::string_view text) const {
  Encoding enc;
  bool after_break = true;
  std::size_t i = 0;
  auto emit = [&](std::string_view word) {
    TokenId id;
    if (auto found = lookup(word)) {
      id = *found;
    } else if (unk_) {
      id = *unk_;
    } else {
      throw ParseError("word '" + std::string(word) + "' not in vocabulary and no <unk> token");
    }
    enc.ids.push_back(id);
    if (word == "\n") {
      enc.texts.emplace_back("\n");
      after_break = true;
    } else {
      enc.texts.push_back((after_break ? "" : " ") + std::string(word));
      after_break = false;
    }
  };
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
    } else if (c == '\n') {
      emit("\n");
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != '\r' && text[j] != '\n') ++j;
      emit(text.substr(i, j - i));
      i = j;
    }
  }
  return enc;
}

std::vector<std::string> WhitespaceTokenizer::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> texts;
  texts.reserve(ids.size());
  bool after_break = true;
  for (TokenId id : ids) {
    const std::string& tok = token(id);
    if (tok == "\n") {
      texts.emplace_back("\n");
      after_break = true;
    } else {
      texts.push_back((after_break ? "" : " ") + tok);
      after_break = false;
    }
  }
  return texts;
}

}  // namespace saesens
