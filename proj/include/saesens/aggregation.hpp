#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/examples.hpp"
#include "saesens/scoring.hpp"
#include "saesens/text_analysis.hpp"

namespace saesens {

// Spearman rank correlation with average ranks for ties.
// Requires equal lengths >= 3; throws UndefinedMetricError for constant input.
double spearman(std::span<const double> x, std::span<const double> y);

// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

using SaeFrequencies = std::map<std::string, std::map<FeatureId, double>>;

// Re-weights features so each SAE's frequency histogram matches the average
// histogram across SAEs. Bins are log-spaced over the pooled frequency range.
struct FrequencyWeighting {
  std::vector<double> bin_edges;            // n_bins + 1
  std::vector<double> target_distribution;  // per-bin mass, sums to 1
  std::map<std::string, std::map<FeatureId, double>> weights;  // mean 1 within each SAE
  std::map<std::string, std::vector<double>> sae_mass;         // unweighted per-bin mass
  std::map<std::string, std::vector<std::size_t>> uncovered_bins;  // target mass the SAE cannot supply
  std::map<std::string, double> achieved_mass;  // target mass in bins the SAE covers

  std::size_t bin_of(double frequency) const;
  // Per-bin mass of the SAE's features under its weights.
  std::vector<double> weighted_mass(const std::string& sae_id, const std::map<FeatureId, double>& freqs) const;
};

FrequencyWeighting build_frequency_weighting(const SaeFrequencies& freqs, std::size_t n_bins = 20);

struct FeatureMetrics {
  std::map<FeatureId, double> frequency;
  std::map<FeatureId, double> max_cosine;
  std::map<FeatureId, double> interp;  // ingested auto-interpretability scores
};

struct CorrelationEntry {
  std::string metric;
  std::optional<double> rho;
  std::size_t n = 0;
  std::string note;  // why rho is absent
};

struct SaeInfo {
  std::string sae_id;
  std::size_t width = 0;
  std::string l0_label;
};

struct SaeReport {
  SaeInfo info;
  std::size_t n_features_sampled = 0;
  std::size_t n_passed_filter = 0;
  std::size_t n_excluded_count = 0;       // failed the example-count criterion (checked first)
  std::size_t n_excluded_truncation = 0;  // enough examples, failed truncation only
  std::size_t n_scored = 0;
  std::vector<UnevaluatedFeature> unevaluated;
  std::optional<double> mean_sensitivity;
  std::optional<double> weighted_mean_sensitivity;
  std::vector<std::size_t> histogram;  // 10 equal-width bins over [0, 1]
  std::vector<CorrelationEntry> correlations;
  std::vector<OverlapStats> overlap;

  const CorrelationEntry* correlation(const std::string& metric) const;
};

struct AggregateInputs {
  std::span<const SensitivityRecord> records;
  std::span<const FilterVerdict> verdicts;
  const FeatureMetrics* metrics = nullptr;
  const std::map<FeatureId, double>* weights = nullptr;
  std::vector<UnevaluatedFeature> unevaluated;
  std::vector<OverlapStats> overlap;
};

// Statistics over features that passed filtering and were scored.
SaeReport aggregate_sae(const SaeInfo& info, const AggregateInputs& inputs);

// Features with interp >= interp_min and sensitivity <= sens_max, ascending ids.
std::vector<FeatureId> interp_threshold_slice(std::span<const SensitivityRecord> records,
                                              const std::map<FeatureId, double>& interp_scores, double interp_min,
                                              double sens_max);

// Two columns per line: feature id, score in [0, 1]. Comma, tab or space
// separated; a non-numeric first line is taken as a header.
std::map<FeatureId, double> read_interp_scores(const std::filesystem::path& path);

nlohmann::json to_json(const SaeReport& r);
nlohmann::json to_json(const FrequencyWeighting& w);

// Run-level table, one row per SAE.
std::string summary_csv(std::span<const SaeReport> reports);
nlohmann::json summary_json(std::span<const SaeReport> reports);

}  // namespace saesens
