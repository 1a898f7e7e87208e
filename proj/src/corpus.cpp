#include "saesens/corpus.hpp"

#include <algorithm>
#include <cstring>

#include "saesens/error.hpp"
#include "saesens/rng.hpp"

namespace saesens {

void TokenSequence::validate() const {
  if (tokens.empty()) throw ValidationError("token sequence is empty");
  if (tokens.size() != texts.size()) {
    throw ValidationError("token sequence has " + std::to_string(tokens.size()) + " ids but " +
                          std::to_string(texts.size()) + " texts");
  }
}

CorpusFormat parse_corpus_format(const std::string& name) {
  if (name == "text_lines" || name == "lines") return CorpusFormat::text_lines;
  if (name == "text_blocks" || name == "blocks") return CorpusFormat::text_blocks;
  if (name == "token_ids" || name == "ids") return CorpusFormat::token_ids;
  throw ConfigError("unknown corpus format '" + name + "'");
}

std::string to_string(CorpusFormat format) {
  switch (format) {
    case CorpusFormat::text_lines: return "text_lines";
    case CorpusFormat::text_blocks: return "text_blocks";
    case CorpusFormat::token_ids: return "token_ids";
  }
  return "unknown";
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

// Returns the offset of the first invalid byte, or npos.
std::size_t find_invalid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t n = 0;
    if (c < 0x80) {
      n = 0;
    } else if ((c & 0xe0) == 0xc0 && c >= 0xc2) {
      n = 1;
    } else if ((c & 0xf0) == 0xe0) {
      n = 2;
    } else if ((c & 0xf8) == 0xf0 && c <= 0xf4) {
      n = 3;
    } else {
      return i;
    }
    for (std::size_t k = 1; k <= n; ++k) {
      if (i + k >= s.size() || (static_cast<unsigned char>(s[i + k]) & 0xc0) != 0x80) return i + k;
    }
    i += n + 1;
  }
  return std::string_view::npos;
}

}  // namespace

void write_token_corpus(const std::filesystem::path& path,
                        const std::vector<std::vector<TokenId>>& documents) {
  std::string out(kTokenCorpusMagic, sizeof(kTokenCorpusMagic));
  put_u64(out, documents.size());
  for (const auto& doc : documents) put_u64(out, doc.size());
  for (const auto& doc : documents) {
    for (TokenId id : doc) {
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((id >> (8 * i)) & 0xff));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Corpus Corpus::open(const std::filesystem::path& path, CorpusFormat format,
                    std::shared_ptr<const Tokenizer> tokenizer) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus " + path.string());
  Corpus corpus;
  corpus.path_ = path;
  corpus.format_ = format;
  corpus.tokenizer_ = std::move(tokenizer);

  if (format != CorpusFormat::token_ids) {
    if (!corpus.tokenizer_) throw ConfigError("text corpus requires a tokenizer");
    return corpus;
  }

  const auto file_size = static_cast<std::size_t>(std::filesystem::file_size(path));
  unsigned char header[16];
  in.read(reinterpret_cast<char*>(header), 16);
  const auto got = static_cast<std::size_t>(in.gcount());
  for (std::size_t i = 0; i < std::min<std::size_t>(got, 8); ++i) {
    if (header[i] != static_cast<unsigned char>(kTokenCorpusMagic[i])) {
      throw FormatError("not a token-id corpus: bad magic", i);
    }
  }
  if (got < 16) throw FormatError("truncated token-id corpus header", got);
  const std::uint64_t n_docs = get_u64(header + 8);
  if (n_docs > (file_size - 16) / 8) throw FormatError("document count exceeds file size", 8);

  auto lengths = std::make_shared<std::vector<std::uint64_t>>(n_docs);
  std::vector<unsigned char> index(n_docs * 8);
  in.read(reinterpret_cast<char*>(index.data()), static_cast<std::streamsize>(index.size()));
  std::uint64_t total = 0;
  for (std::uint64_t d = 0; d < n_docs; ++d) {
    (*lengths)[d] = get_u64(index.data() + 8 * d);
    total += (*lengths)[d];
    if (total > file_size) throw FormatError("document length exceeds file size", 16 + 8 * d);
  }
  const std::size_t expected = 16 + 8 * n_docs + 4 * total;
  if (file_size < expected) throw FormatError("truncated token data", file_size);
  if (file_size > expected) throw FormatError("trailing bytes after token data", expected);
  corpus.doc_lengths_ = std::move(lengths);
  return corpus;
}

DocumentCursor::DocumentCursor(const Corpus& corpus)
    : corpus_(&corpus), in_(corpus.path_, std::ios::binary) {
  if (!in_) throw IoError("cannot open corpus " + corpus.path_.string());
  if (corpus.format_ == CorpusFormat::token_ids) {
    byte_offset_ = 16 + 8 * corpus.doc_lengths_->size();
    in_.seekg(static_cast<std::streamoff>(byte_offset_));
  }
}

std::optional<Document> DocumentCursor::next() {
  const Corpus& c = *corpus_;
  Document doc;
  if (c.format_ == CorpusFormat::token_ids) {
    if (index_ >= c.doc_lengths_->size()) return std::nullopt;
    const std::uint64_t n = (*c.doc_lengths_)[index_];
    std::vector<unsigned char> raw(4 * n);
    in_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::uint64_t>(in_.gcount()) != raw.size()) {
      throw FormatError("truncated token data", byte_offset_ + static_cast<std::size_t>(in_.gcount()));
    }
    doc.tokens.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      const unsigned char* p = raw.data() + 4 * i;
      doc.tokens[i] = static_cast<TokenId>(p[0]) | (static_cast<TokenId>(p[1]) << 8) |
                      (static_cast<TokenId>(p[2]) << 16) | (static_cast<TokenId>(p[3]) << 24);
    }
    if (c.tokenizer_) {
      doc.texts = c.tokenizer_->decode(doc.tokens);
    } else {
      doc.texts.reserve(n);
      for (TokenId id : doc.tokens) doc.texts.push_back(std::to_string(id));
    }
    byte_offset_ += raw.size();
  } else {
    std::string text;
    std::string line;
    bool found = false;
    while (std::getline(in_, line)) {
      const std::size_t line_start = byte_offset_;
      byte_offset_ += line.size() + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (auto bad = find_invalid_utf8(line); bad != std::string_view::npos) {
        throw FormatError("invalid UTF-8 in corpus " + c.path_.string(), line_start + bad);
      }
      if (c.format_ == CorpusFormat::text_lines) {
        text = std::move(line);
        found = true;
        break;
      }
      if (line.find_first_not_of(" \t") == std::string::npos) {
        if (found) break;
        continue;
      }
      if (found) text += '\n';
      text += line;
      found = true;
    }
    if (!found) return std::nullopt;
    Encoding enc = c.tokenizer_->encode(text);
    doc.tokens = std::move(enc.ids);
    doc.texts = std::move(enc.texts);
  }
  doc.source_id = "d" + std::to_string(index_);
  ++index_;
  return doc;
}

CorpusSample sample_sequences(const Corpus& corpus, std::size_t token_budget, std::size_t seq_len,
                              std::uint64_t seed) {
  if (seq_len < 1) throw PreconditionError("seq_len must be at least 1");
  if (token_budget < seq_len) throw PreconditionError("token_budget must be at least seq_len");

  struct Chunk {
    std::size_t doc;
    std::size_t chunk;
  };
  std::vector<Chunk> positions;
  {
    auto cursor = corpus.cursor();
    std::size_t d = 0;
    while (auto doc = cursor.next()) {
      const std::size_t n_chunks = doc->tokens.size() / seq_len;
      for (std::size_t k = 0; k < n_chunks; ++k) positions.push_back({d, k});
      ++d;
    }
  }

  CorpusSample sample;
  sample.seed = seed;
  sample.seq_len = seq_len;
  sample.token_budget = token_budget;
  std::size_t wanted = token_budget / seq_len;
  if (positions.size() < wanted) {
    sample.warnings.push_back("corpus holds " + std::to_string(positions.size()) +
                              " full chunks of " + std::to_string(seq_len) + " tokens; " +
                              std::to_string(wanted) + " requested");
    wanted = positions.size();
  }

  // Partial Fisher-Yates: the first `wanted` slots become a uniform sample.
  Rng rng(seed);
  for (std::size_t i = 0; i < wanted; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(positions.size() - i));
    std::swap(positions[i], positions[j]);
  }
  positions.resize(wanted);
  std::sort(positions.begin(), positions.end(), [](const Chunk& a, const Chunk& b) {
    return a.doc != b.doc ? a.doc < b.doc : a.chunk < b.chunk;
  });

  sample.sequences.reserve(wanted);
  auto cursor = corpus.cursor();
  std::size_t d = 0;
  std::size_t next = 0;
  const std::string tok_id = corpus.tokenizer_id();
  while (next < positions.size()) {
    auto doc = cursor.next();
    if (!doc) break;
    while (next < positions.size() && positions[next].doc == d) {
      const std::size_t start = positions[next].chunk * seq_len;
      TokenSequence seq;
      seq.tokens.assign(doc->tokens.begin() + static_cast<std::ptrdiff_t>(start),
                        doc->tokens.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
      seq.texts.assign(doc->texts.begin() + static_cast<std::ptrdiff_t>(start),
                       doc->texts.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
      seq.source_id = doc->source_id;
      seq.offset = start;
      seq.tokenizer_id = tok_id;
      sample.total_tokens += seq_len;
      sample.sequences.push_back(std::move(seq));
      ++next;
    }
    ++d;
  }
  return sample;
}

nlohmann::json to_json(const TokenSequence& seq) {
  return {{"source_id", seq.source_id},
          {"offset", seq.offset},
          {"tokenizer_id", seq.tokenizer_id},
          {"tokens", seq.tokens},
          {"texts", seq.texts}};
}

TokenSequence token_sequence_from_json(const nlohmann::json& j) {
  TokenSequence seq;
  seq.source_id = j.at("source_id").get<std::string>();
  seq.offset = j.at("offset").get<std::size_t>();
  seq.tokenizer_id = j.value("tokenizer_id", std::string());
  seq.tokens = j.at("tokens").get<std::vector<TokenId>>();
  seq.texts = j.at("texts").get<std::vector<std::string>>();
  return seq;
}

nlohmann::json to_json(const CorpusSample& sample) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& s : sample.sequences) seqs.push_back(to_json(s));
  return {{"seed", sample.seed},
          {"seq_len", sample.seq_len},
          {"token_budget", sample.token_budget},
          {"total_tokens", sample.total_tokens},
          {"warnings", sample.warnings},
          {"sequences", std::move(seqs)}};
}

CorpusSample corpus_sample_from_json(const nlohmann::json& j) {
  CorpusSample sample;
  sample.seed = j.at("seed").get<std::uint64_t>();
  sample.seq_len = j.at("seq_len").get<std::size_t>();
  sample.token_budget = j.at("token_budget").get<std::size_t>();
  sample.total_tokens = j.at("total_tokens").get<std::size_t>();
  sample.warnings = j.at("warnings").get<std::vector<std::string>>();
  for (const auto& s : j.at("sequences")) sample.sequences.push_back(token_sequence_from_json(s));
  return sample;
}

}  // namespace saesens
