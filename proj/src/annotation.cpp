#include "saesens/annotation.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "saesens/error.hpp"
#include "saesens/io.hpp"
#include "saesens/rng.hpp"

namespace saesens {

std::string to_string(ItemCategory c) {
  switch (c) {
    case ItemCategory::positive_control: return "positive_control";
    case ItemCategory::negative_control: return "negative_control";
    case ItemCategory::method_generated: return "method_generated";
  }
  return "method_generated";
}

ItemCategory parse_item_category(const std::string& s) {
  if (s == "positive_control") return ItemCategory::positive_control;
  if (s == "negative_control") return ItemCategory::negative_control;
  if (s == "method_generated") return ItemCategory::method_generated;
  throw ParseError("unknown item category: " + s);
}

bool is_rating_label(const std::string& label) {
  const auto& labels = rating_labels();
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

const AnnotationItem* Session::find(const std::string& item_id) const {
  for (const auto& it : items) {
    if (it.item_id == item_id) return &it;
  }
  return nullptr;
}

SessionMix SessionMix::parse(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      parts.push_back(std::stod(tok, &used));
      if (tok.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ParseError("mix must be three comma-separated numbers, got: " + text);
    }
  }
  if (parts.size() != 3) throw ParseError("mix must be three comma-separated numbers, got: " + text);
  SessionMix m{parts[0], parts[1], parts[2]};
  m.validate();
  return m;
}

void SessionMix::validate() const {
  if (positive < 0 || negative < 0 || method < 0) throw ConfigError("mix fractions must be non-negative");
  if (std::abs(positive + negative + method - 1.0) > 1e-9) throw ConfigError("mix fractions must sum to 1");
}

SessionCounts session_counts(std::size_t n_items, const SessionMix& mix) {
  mix.validate();
  const double n = static_cast<double>(n_items);
  SessionCounts c;
  c.positive = static_cast<std::size_t>(std::llround(n * mix.positive));
  c.negative = static_cast<std::size_t>(std::llround(n * mix.negative));
  if (c.positive + c.negative > n_items) {
    // Only reachable when both controls round up and the method share is ~0.
    c.negative = n_items - c.positive;
  }
  c.method = n_items - c.positive - c.negative;
  return c;
}

namespace {

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

std::vector<std::string> context_for(const ExampleSet& set, const SessionConfig& cfg) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(cfg.context_top, set.top_examples.size()); ++i) {
    out.push_back(render_example(set.top_examples[i]));
  }
  for (std::size_t i = 0; i < std::min(cfg.context_sampled, set.sampled_examples.size()); ++i) {
    out.push_back(render_example(set.sampled_examples[i]));
  }
  return out;
}

void require(std::size_t have, std::size_t need, ItemCategory c) {
  if (have < need) {
    throw AssemblyError("not enough " + to_string(c) + " items: need " + std::to_string(need) + ", have " +
                        std::to_string(have));
  }
}

struct Candidate {
  FeatureId feature;
  std::size_t sample;  // generated sample index (unused for positives)
};

}  // namespace

Session build_session(const std::string& session_id, std::span<const FeatureArtifacts> features,
                      const std::map<FeatureId, double>& interp_scores, const SessionConfig& cfg) {
  const SessionCounts counts = session_counts(cfg.n_items, cfg.mix);

  std::vector<const FeatureArtifacts*> sorted;
  for (const auto& f : features) sorted.push_back(&f);
  std::sort(sorted.begin(), sorted.end(),
            [](const FeatureArtifacts* a, const FeatureArtifacts* b) { return a->feature_id < b->feature_id; });
  std::map<FeatureId, const FeatureArtifacts*> by_id;
  for (const auto* f : sorted) by_id[f->feature_id] = f;

  auto eligible = [&](const FeatureArtifacts& f) {
    auto it = interp_scores.find(f.feature_id);
    return it != interp_scores.end() && it->second >= cfg.interp_threshold && f.examples &&
           !f.examples->top_examples.empty();
  };

  std::vector<Candidate> positives, negatives, methods;
  std::vector<FeatureId> generators;  // features with any generated text
  for (const auto* f : sorted) {
    if (f->generation && f->generation->usable() && !f->generation->samples.empty()) {
      generators.push_back(f->feature_id);
    }
  }
  for (const auto* f : sorted) {
    if (!eligible(*f)) continue;
    if (!f->examples->held_out.empty()) positives.push_back({f->feature_id, 0});
    const bool has_other = generators.size() > 1 ||
                           (generators.size() == 1 && generators.front() != f->feature_id);
    if (has_other) negatives.push_back({f->feature_id, 0});
    if (f->record && f->generation) {
      for (const auto& s : f->record->per_sample) {
        if (!s.activated && s.sample_index < f->generation->samples.size()) {
          methods.push_back({f->feature_id, s.sample_index});
        }
      }
    }
  }
  require(positives.size(), counts.positive, ItemCategory::positive_control);
  require(negatives.size(), counts.negative, ItemCategory::negative_control);
  require(methods.size(), counts.method, ItemCategory::method_generated);

  Rng rng(cfg.seed);
  shuffle(positives, rng);
  shuffle(negatives, rng);
  shuffle(methods, rng);

  std::vector<AnnotationItem> items;
  for (std::size_t i = 0; i < counts.positive; ++i) {
    const auto& f = *by_id.at(positives[i].feature);
    AnnotationItem it;
    it.hidden_category = ItemCategory::positive_control;
    it.feature_id = it.probe_feature_id = f.feature_id;
    it.context_examples = context_for(*f.examples, cfg);
    it.probe_text = plain_text(f.examples->held_out.front());
    items.push_back(std::move(it));
  }
  for (std::size_t i = 0; i < counts.negative; ++i) {
    const auto& f = *by_id.at(negatives[i].feature);
    std::vector<FeatureId> others;
    for (FeatureId g : generators) {
      if (g != f.feature_id) others.push_back(g);
    }
    const auto& src = *by_id.at(others[rng.below(others.size())]);
    const auto& samples = src.generation->samples;
    AnnotationItem it;
    it.hidden_category = ItemCategory::negative_control;
    it.feature_id = f.feature_id;
    it.probe_feature_id = src.feature_id;
    it.context_examples = context_for(*f.examples, cfg);
    it.probe_text = samples[rng.below(samples.size())].clean_text;
    items.push_back(std::move(it));
  }
  for (std::size_t i = 0; i < counts.method; ++i) {
    const auto& f = *by_id.at(methods[i].feature);
    AnnotationItem it;
    it.hidden_category = ItemCategory::method_generated;
    it.feature_id = it.probe_feature_id = f.feature_id;
    it.context_examples = context_for(*f.examples, cfg);
    it.probe_text = f.generation->samples[methods[i].sample].clean_text;
    items.push_back(std::move(it));
  }
  shuffle(items, rng);

  Session s;
  s.session_id = session_id;
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i].index = i;
    // Opaque ids: derived from position and seed, carrying nothing about the item's origin.
    const std::string digest = sha256_hex(session_id + "/" + std::to_string(cfg.seed) + "/" + std::to_string(i));
    items[i].item_id = session_id + "-" + digest.substr(0, 12);
  }
  s.items = std::move(items);
  return s;
}

nlohmann::json to_json(const Session& s) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : s.items) {
    items.push_back({{"item_id", it.item_id},
                     {"index", it.index},
                     {"context_examples", it.context_examples},
                     {"probe_text", it.probe_text},
                     {"hidden_category", to_string(it.hidden_category)},
                     {"feature_id", it.feature_id},
                     {"probe_feature_id", it.probe_feature_id}});
  }
  return {{"schema_version", kAnnotationSchema}, {"session_id", s.session_id}, {"items", std::move(items)}};
}

Session session_from_json(const nlohmann::json& j) {
  try {
    Session s;
    s.session_id = j.at("session_id").get<std::string>();
    for (const auto& e : j.at("items")) {
      AnnotationItem it;
      it.item_id = e.at("item_id").get<std::string>();
      it.index = e.at("index").get<std::size_t>();
      it.context_examples = e.at("context_examples").get<std::vector<std::string>>();
      it.probe_text = e.at("probe_text").get<std::string>();
      it.hidden_category = parse_item_category(e.at("hidden_category").get<std::string>());
      it.feature_id = e.at("feature_id").get<FeatureId>();
      it.probe_feature_id = e.at("probe_feature_id").get<FeatureId>();
      s.items.push_back(std::move(it));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("session: ") + e.what());
  }
}

nlohmann::json ui_payload(const Session& s) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : s.items) {
    items.push_back({{"item_id", it.item_id},
                     {"index", it.index},
                     {"context_examples", it.context_examples},
                     {"probe_text", it.probe_text}});
  }
  return {{"schema_version", kAnnotationSchema},
          {"session_id", s.session_id},
          {"n_items", s.items.size()},
          {"labels", rating_labels()},
          {"items", std::move(items)}};
}

nlohmann::json to_json(const Rating& r) {
  return {{"item_id", r.item_id}, {"annotator_id", r.annotator_id}, {"label", r.label}, {"timestamp", r.timestamp}};
}

Rating rating_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("rating must be an object");
  Rating r;
  for (const char* key : {"item_id", "annotator_id", "label"}) {
    if (!j.contains(key) || !j.at(key).is_string()) {
      throw ValidationError(std::string("rating field missing or not a string: ") + key);
    }
  }
  r.item_id = j.at("item_id").get<std::string>();
  r.annotator_id = j.at("annotator_id").get<std::string>();
  r.label = j.at("label").get<std::string>();
  if (j.contains("timestamp") && j.at("timestamp").is_string()) r.timestamp = j.at("timestamp").get<std::string>();
  return r;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

void write_all_fsync(int fd, const std::string& data, const std::filesystem::path& path) {
  std::size_t done = 0;
  while (done < data.size()) {
    const ssize_t n = ::write(fd, data.data() + done, data.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("write " + path.string() + ": " + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) throw IoError("fsync " + path.string() + ": " + std::strerror(errno));
}

}  // namespace

RatingStore::RatingStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  const auto path = log_path();
  if (!std::filesystem::exists(path)) return;
  const std::string raw = read_file(path);
  std::size_t pos = 0;
  std::size_t good_end = 0;
  while (pos < raw.size()) {
    const std::size_t nl = raw.find('\n', pos);
    if (nl == std::string::npos) {
      // A final line without a newline was never acknowledged.
      spdlog::warn("discarding torn final line in {} at byte {}", path.string(), pos);
      break;
    }
    const std::string line = raw.substr(pos, nl - pos);
    if (!line.empty()) {
      try {
        Rating r = rating_from_json(nlohmann::json::parse(line));
        current_[{r.item_id, r.annotator_id}] = std::move(r);
      } catch (const std::exception& e) {
        throw FormatError("corrupt rating log " + path.string() + ": " + e.what(), pos);
      }
    }
    pos = nl + 1;
    good_end = pos;
  }
  if (good_end < raw.size()) std::filesystem::resize_file(path, good_end);
}

void RatingStore::append_line(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("open " + path.string() + ": " + std::strerror(errno));
  try {
    write_all_fsync(fd, line + "\n", path);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
}

RatingStore::Ack RatingStore::submit(const Rating& in) {
  if (!is_rating_label(in.label)) throw ValidationError("invalid label: " + in.label);
  if (in.item_id.empty()) throw ValidationError("item_id must not be empty");
  if (in.annotator_id.empty()) throw ValidationError("annotator_id must not be empty");
  Rating r = in;
  if (r.timestamp.empty()) r.timestamp = utc_timestamp();

  std::lock_guard lock(mu_);
  Ack ack;
  const auto key = std::make_pair(r.item_id, r.annotator_id);
  if (auto it = current_.find(key); it != current_.end()) {
    ack.overwritten = true;
    ack.previous_label = it->second.label;
    if (it->second.label == r.label) return ack;  // repeated submit, nothing to record
    nlohmann::json audit = {{"event", "overwrite"},
                            {"item_id", r.item_id},
                            {"annotator_id", r.annotator_id},
                            {"previous_label", it->second.label},
                            {"previous_timestamp", it->second.timestamp},
                            {"label", r.label},
                            {"timestamp", r.timestamp}};
    append_line(audit_path(), audit.dump());
  }
  append_line(log_path(), to_json(r).dump());
  current_[key] = std::move(r);
  return ack;
}

std::vector<Rating> RatingStore::ratings() const {
  std::lock_guard lock(mu_);
  std::vector<Rating> out;
  for (const auto& [k, r] : current_) out.push_back(r);
  return out;
}

std::optional<Rating> RatingStore::get(const std::string& item_id, const std::string& annotator_id) const {
  std::lock_guard lock(mu_);
  auto it = current_.find({item_id, annotator_id});
  if (it == current_.end()) return std::nullopt;
  return it->second;
}

std::size_t RatingStore::size() const {
  std::lock_guard lock(mu_);
  return current_.size();
}

void RatingStore::compact() {
  std::lock_guard lock(mu_);
  std::string body;
  for (const auto& [k, r] : current_) body += to_json(r).dump() + "\n";
  const auto path = log_path();
  const auto tmp = std::filesystem::path(path.string() + ".compact");
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("open " + tmp.string() + ": " + std::strerror(errno));
  try {
    write_all_fsync(fd, body, tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::filesystem::rename(tmp, path);
}

RatingDistribution rating_distribution(std::span<const Session> sessions, std::span<const Rating> ratings) {
  if (ratings.empty()) throw PreconditionError("rating distribution needs at least one rating");
  std::map<std::string, ItemCategory> category;
  for (const auto& s : sessions) {
    for (const auto& it : s.items) category[it.item_id] = it.hidden_category;
  }
  RatingDistribution d;
  std::map<ItemCategory, CategoryDistribution> rows;
  std::size_t unknown = 0;
  for (const auto& r : ratings) {
    auto it = category.find(r.item_id);
    if (it == category.end()) {
      ++unknown;
      continue;
    }
    auto& row = rows[it->second];
    row.category = it->second;
    row.n += 1;
    row.counts[r.label] += 1;
  }
  for (ItemCategory c :
       {ItemCategory::method_generated, ItemCategory::positive_control, ItemCategory::negative_control}) {
    auto it = rows.find(c);
    if (it == rows.end()) {
      d.notes.push_back("no ratings for " + to_string(c) + "; row omitted");
      continue;
    }
    auto row = it->second;
    for (const auto& label : rating_labels()) {
      row.counts.try_emplace(label, 0);
      row.fractions[label] = static_cast<double>(row.counts[label]) / static_cast<double>(row.n);
    }
    d.rows.push_back(std::move(row));
  }
  if (unknown > 0) d.notes.push_back(std::to_string(unknown) + " rating(s) reference unknown items");
  return d;
}

nlohmann::json to_json(const RatingDistribution& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : d.rows) {
    nlohmann::json counts = nlohmann::json::object(), fractions = nlohmann::json::object();
    for (const auto& label : rating_labels()) {
      counts[label] = r.counts.at(label);
      fractions[label] = r.fractions.at(label);
    }
    rows.push_back({{"category", to_string(r.category)}, {"n", r.n}, {"counts", counts}, {"fractions", fractions}});
  }
  return {{"schema_version", kAnnotationSchema}, {"categories", std::move(rows)}, {"notes", d.notes}};
}

}  // namespace saesens
