#include "saesens/generation.hpp"

#include <algorithm>

#include "saesens/error.hpp"
#include "saesens/io.hpp"

namespace saesens {

namespace {

constexpr std::string_view kSystemTemplate =
    "You are a meticulous AI researcher conducting an important investigation into a specific feature inside a "
    "language model that activates in response to text inputs. Your overall task is to generate additional text "
    "samples that cause the feature to strongly activate.\n"
    "\n"
    "You will receive a list of text examples on which the feature activates. Specific tokens causing activation "
    "will appear between delimiters like {{this}}. Consecutive activating tokens will also be accordingly "
    "delimited {{just like this}}. If no tokens are highlighted with {}, then the feature does not activate on any "
    "tokens in the input.\n"
    "\n"
    "Note: features activate on a word-by-word basis. Also, feature activations can only depend on words before "
    "the word it activates on.";

constexpr std::string_view kUserTemplate =
    "Consider the feature that activates when the given examples below are present. Your task is to generate text "
    "samples that strongly activate this feature. Study the examples carefully to identify both their shared and "
    "varying traits. Your generated samples should:\n"
    "- Preserve any consistent traits, patterns, or constraints present across all examples\n"
    "- Match the diversity level shown in the examples—neither more diverse nor more uniform\n"
    "- Vary along the same dimensions that the examples vary (e.g., if examples differ in tone but share a topic, "
    "maintain that pattern)\n"
    "- Avoid introducing new types of variation not present in the example set\n"
    "- Avoid collapsing into repetitive or overly similar outputs\n"
    "\n"
    "Generate exactly {samples_requested} new samples separated by <SAMPLE_SEPARATOR/>. Note that the feature may "
    "involve semantic content, grammatical structures, abstract concepts, specific named entities (e.g., people, "
    "organizations, locations), or formatting elements like newlines, punctuation, citations, or special "
    "characters, for example, {{\\n}}, or {{↵}} represent newlines, {{,}} represents commas, {{-}} represents "
    "hyphens, etc that are activating the feature. Present each sample without numbering or bullets.\n"
    "Important: place <SAMPLE_SEPARATOR/> between generated samples.\n"
    "\n"
    "See the following {example_count} examples that activate the feature, separated by\n"
    "<SAMPLE_SEPARATOR/>:\n"
    "\n"
    "{examples}";

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

constexpr std::string_view kReturnSymbol = "↵";

}  // namespace

std::string system_prompt_template() { return std::string(kSystemTemplate); }
std::string user_prompt_template() { return std::string(kUserTemplate); }

std::string prompt_template_hash() {
  return sha256_hex(std::string(kSystemTemplate) + "\x1f" + std::string(kUserTemplate));
}

PromptBundle build_prompt(const ExampleSet& examples, const GenerationSettings& settings) {
  const auto shown = examples.shown();
  if (shown.empty()) throw PreconditionError("build_prompt needs at least one example");

  std::string body;
  for (const ActivatingExample* ex : shown) {
    body += kSampleSeparator;
    body += '\n';
    body += render_example(*ex);
    body += "\n\n";
  }
  body.pop_back();

  std::string user(kUserTemplate);
  // {examples} goes last so example text is never scanned for placeholders.
  replace_all(user, "{samples_requested}", std::to_string(settings.samples_requested));
  replace_all(user, "{example_count}", std::to_string(shown.size()));
  const auto pos = user.find("{examples}");
  user.replace(pos, std::string_view("{examples}").size(), body);

  PromptBundle p;
  p.feature_id = examples.feature_id;
  p.system_text = std::string(kSystemTemplate);
  p.user_text = std::move(user);
  p.example_count = shown.size();
  p.model = settings.model;
  p.temperature = settings.temperature;
  p.max_tokens = settings.max_tokens;
  p.seed = settings.seed;
  return p;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::string_view strip_quotes(std::string_view s) {
  static constexpr std::string_view kOpenCurly = "“";
  static constexpr std::string_view kCloseCurly = "”";
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return trim(s.substr(1, s.size() - 2));
  if (s.size() >= kOpenCurly.size() + kCloseCurly.size() && s.starts_with(kOpenCurly) && s.ends_with(kCloseCurly)) {
    return trim(s.substr(kOpenCurly.size(), s.size() - kOpenCurly.size() - kCloseCurly.size()));
  }
  return s;
}

// Decodes one escape at s[i] if present; returns consumed byte count.
std::size_t decode_escape(std::string_view s, std::size_t i, std::string& out) {
  if (s[i] == '\\' && i + 1 < s.size()) {
    const char n = s[i + 1];
    if (n == 'n') {
      out.push_back('\n');
      return 2;
    }
    if (n == '{' || n == '}') {
      out.push_back(n);
      return 2;
    }
  }
  if (s.substr(i).starts_with(kReturnSymbol)) {
    out.push_back('\n');
    return kReturnSymbol.size();
  }
  return 0;
}

}  // namespace

GeneratedSample parse_marked_text(std::string_view raw, const Tokenizer* tokenizer) {
  GeneratedSample sample;
  sample.raw_text = std::string(raw);
  std::string& clean = sample.clean_text;
  std::size_t i = 0;
  while (i < raw.size()) {
    if (std::size_t used = decode_escape(raw, i, clean)) {
      i += used;
      continue;
    }
    if (raw.substr(i).starts_with("{{")) {
      // Find the closing "}}", decoding escapes so "\}" never closes.
      std::string content;
      std::size_t j = i + 2;
      bool closed = false;
      while (j < raw.size()) {
        if (std::size_t used = decode_escape(raw, j, content)) {
          j += used;
          continue;
        }
        if (raw.substr(j).starts_with("}}")) {
          closed = true;
          break;
        }
        if (raw.substr(j).starts_with("{{")) break;  // a new opener before a close: unbalanced
        content.push_back(raw[j]);
        ++j;
      }
      if (closed && content.empty()) {
        i = j + 2;
        continue;
      }
      if (closed) {
        sample.target_spans.push_back({clean.size(), clean.size() + content.size()});
        clean += content;
        i = j + 2;
        continue;
      }
      clean += "{{";
      i += 2;
      continue;
    }
    clean.push_back(raw[i]);
    ++i;
  }
  if (tokenizer && !sample.target_spans.empty()) {
    const auto prefix = std::string_view(clean).substr(0, sample.target_spans.front().start);
    sample.first_target_token_index = tokenizer->encode(prefix).ids.size();
  }
  return sample;
}

std::vector<GeneratedSample> parse_samples(std::string_view response_text, const Tokenizer* tokenizer) {
  std::vector<GeneratedSample> out;
  std::size_t start = 0;
  while (start <= response_text.size()) {
    std::size_t end = response_text.find(kSampleSeparator, start);
    if (end == std::string_view::npos) end = response_text.size();
    const auto segment = strip_quotes(trim(response_text.substr(start, end - start)));
    if (!segment.empty()) {
      auto sample = parse_marked_text(segment, tokenizer);
      if (!trim(sample.clean_text).empty()) out.push_back(std::move(sample));
    }
    start = end + kSampleSeparator.size();
  }
  if (out.empty()) throw ParseError("response contained no non-empty samples");
  return out;
}

std::string mark_text(std::string_view clean_text, std::span<const TextSpan> spans) {
  struct Unit {
    char c;
    bool literal;
  };
  std::vector<Unit> units;
  std::size_t next = 0;
  for (std::size_t i = 0; i <= clean_text.size(); ++i) {
    if (next < spans.size() && spans[next].end == i && spans[next].start < i) {
      units.push_back({'}', false});
      units.push_back({'}', false});
      ++next;
    }
    if (i == clean_text.size()) break;
    if (next < spans.size() && spans[next].start == i) {
      units.push_back({'{', false});
      units.push_back({'{', false});
    }
    const char c = clean_text[i];
    if (c == '\n') {
      units.push_back({'\\', true});
      units.push_back({'n', true});
    } else {
      units.push_back({c, true});
    }
  }
  std::string out;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const char c = units[i].c;
    if (units[i].literal && (c == '{' || c == '}')) {
      if ((i > 0 && units[i - 1].c == c) || (i + 1 < units.size() && units[i + 1].c == c)) out.push_back('\\');
    }
    out.push_back(c);
  }
  return out;
}

std::string to_string(GenerationStatus s) {
  switch (s) {
    case GenerationStatus::ok: return "ok";
    case GenerationStatus::low_sample: return "low_sample";
    case GenerationStatus::unevaluated: return "unevaluated";
  }
  return "unknown";
}

GenerationStatus parse_generation_status(const std::string& s) {
  if (s == "ok") return GenerationStatus::ok;
  if (s == "low_sample") return GenerationStatus::low_sample;
  if (s == "unevaluated") return GenerationStatus::unevaluated;
  throw FormatError("unknown generation status '" + s + "'", 0);
}

TargetPositionHistogram target_position_histogram(std::span<const GenerationResult> results) {
  TargetPositionHistogram h;
  std::size_t zero = 0;
  std::size_t le_five = 0;
  for (const auto& r : results) {
    for (const auto& s : r.samples) {
      if (!s.first_target_token_index) {
        ++h.unmarked;
        continue;
      }
      const std::size_t idx = *s.first_target_token_index;
      ++h.counts[idx];
      ++h.marked;
      if (idx == 0) ++zero;
      if (idx <= 5) ++le_five;
    }
  }
  if (h.marked) {
    h.fraction_at_zero = static_cast<double>(zero) / static_cast<double>(h.marked);
    h.fraction_le_five = static_cast<double>(le_five) / static_cast<double>(h.marked);
  }
  return h;
}

nlohmann::json to_json(const GeneratedSample& s) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& sp : s.target_spans) spans.push_back({sp.start, sp.end});
  nlohmann::json j = {{"raw_text", s.raw_text}, {"clean_text", s.clean_text}, {"target_spans", std::move(spans)}};
  j["first_target_token_index"] =
      s.first_target_token_index ? nlohmann::json(*s.first_target_token_index) : nlohmann::json(nullptr);
  return j;
}

GeneratedSample generated_sample_from_json(const nlohmann::json& j) {
  GeneratedSample s;
  s.raw_text = j.at("raw_text").get<std::string>();
  s.clean_text = j.at("clean_text").get<std::string>();
  for (const auto& sp : j.at("target_spans")) s.target_spans.push_back({sp.at(0).get<std::size_t>(), sp.at(1).get<std::size_t>()});
  if (const auto& f = j.at("first_target_token_index"); !f.is_null()) s.first_target_token_index = f.get<std::size_t>();
  return s;
}

nlohmann::json to_json(const GenerationResult& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) samples.push_back(to_json(s));
  return {{"feature_id", r.feature_id},
          {"status", to_string(r.status)},
          {"attempts", r.attempts},
          {"error", r.error},
          {"provider_metadata", r.provider_metadata},
          {"samples", std::move(samples)}};
}

GenerationResult generation_result_from_json(const nlohmann::json& j) {
  GenerationResult r;
  r.feature_id = j.at("feature_id").get<FeatureId>();
  r.status = parse_generation_status(j.at("status").get<std::string>());
  r.attempts = j.at("attempts").get<int>();
  r.error = j.value("error", std::string());
  r.provider_metadata = j.value("provider_metadata", nlohmann::json::object());
  for (const auto& s : j.at("samples")) r.samples.push_back(generated_sample_from_json(s));
  return r;
}

nlohmann::json to_json(const TargetPositionHistogram& h) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [idx, n] : h.counts) counts.push_back({idx, n});
  return {{"counts", std::move(counts)},
          {"marked", h.marked},
          {"unmarked", h.unmarked},
          {"fraction_at_zero", h.fraction_at_zero},
          {"fraction_le_five", h.fraction_le_five}};
}

}  // namespace saesens
