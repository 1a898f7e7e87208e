#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/examples.hpp"
#include "saesens/generation.hpp"
#include "saesens/scoring.hpp"

namespace saesens {

inline constexpr int kAnnotationSchema = 1;

enum class ItemCategory { positive_control, negative_control, method_generated };
std::string to_string(ItemCategory c);
ItemCategory parse_item_category(const std::string& s);

inline const std::vector<std::string>& rating_labels() {
  static const std::vector<std::string> labels = {"indistinguishable", "closely_related", "weakly_related",
                                                  "unrelated"};
  return labels;
}
bool is_rating_label(const std::string& label);

struct AnnotationItem {
  std::string item_id;
  std::size_t index = 0;
  std::vector<std::string> context_examples;  // rendered with markers
  std::string probe_text;                     // never marked
  ItemCategory hidden_category = ItemCategory::method_generated;
  FeatureId feature_id = 0;        // feature the context belongs to
  FeatureId probe_feature_id = 0;  // differs from feature_id for negative controls
};

struct Session {
  std::string session_id;
  std::vector<AnnotationItem> items;

  const AnnotationItem* find(const std::string& item_id) const;
};

struct SessionMix {
  double positive = 0.2;
  double negative = 0.2;
  double method = 0.6;

  // "0.2,0.2,0.6" in positive, negative, method order.
  static SessionMix parse(const std::string& text);
  void validate() const;
};

struct SessionCounts {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t method = 0;
};

// Controls are rounded to the nearest count (halves away from zero); method
// items take the remainder so the total is always n_items.
SessionCounts session_counts(std::size_t n_items, const SessionMix& mix);

struct SessionConfig {
  std::size_t n_items = 10;
  SessionMix mix;
  std::uint64_t seed = 0;
  double interp_threshold = 0.9;
  std::size_t context_top = 5;
  std::size_t context_sampled = 3;
};

// Run artifacts for one feature. Any pointer may be null.
struct FeatureArtifacts {
  FeatureId feature_id = 0;
  const ExampleSet* examples = nullptr;
  const GenerationResult* generation = nullptr;
  const SensitivityRecord* record = nullptr;
};

// Throws AssemblyError naming the category that is short.
Session build_session(const std::string& session_id, std::span<const FeatureArtifacts> features,
                      const std::map<FeatureId, double>& interp_scores, const SessionConfig& config);

// Everything including hidden categories; for server-side storage only.
nlohmann::json to_json(const Session& s);
Session session_from_json(const nlohmann::json& j);
// What the annotator sees: item ids, context and probe text only.
nlohmann::json ui_payload(const Session& s);

struct Rating {
  std::string item_id;
  std::string annotator_id;
  std::string label;
  std::string timestamp;  // ISO 8601 UTC
};

nlohmann::json to_json(const Rating& r);
Rating rating_from_json(const nlohmann::json& j);
std::string utc_timestamp();

// Append-only JSON-lines log, one line per submission, fsynced before the
// call returns. The latest line per (item, annotator) wins; overwrites are
// also recorded in a separate audit log. A torn final line left by a crash is
// discarded on open.
class RatingStore {
 public:
  explicit RatingStore(std::filesystem::path dir);

  struct Ack {
    bool overwritten = false;
    std::optional<std::string> previous_label;
  };

  Ack submit(const Rating& rating);
  std::vector<Rating> ratings() const;  // current ratings, ordered by (item, annotator)
  std::optional<Rating> get(const std::string& item_id, const std::string& annotator_id) const;
  std::size_t size() const;
  // Rewrites the log with only current ratings.
  void compact();

  std::filesystem::path log_path() const { return dir_ / "ratings.log"; }
  std::filesystem::path audit_path() const { return dir_ / "audit.log"; }

 private:
  void append_line(const std::filesystem::path& path, const std::string& line);

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, Rating> current_;
};

struct CategoryDistribution {
  ItemCategory category = ItemCategory::method_generated;
  std::size_t n = 0;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> fractions;
};

struct RatingDistribution {
  std::vector<CategoryDistribution> rows;  // categories without ratings are omitted
  std::vector<std::string> notes;
};

// Unblinds ratings through the sessions' hidden categories. Requires at least one rating.
RatingDistribution rating_distribution(std::span<const Session> sessions, std::span<const Rating> ratings);
nlohmann::json to_json(const RatingDistribution& d);

}  // namespace saesens
