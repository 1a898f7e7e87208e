#include "saesens/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "saesens/error.hpp"
#include "saesens/io.hpp"

namespace saesens {

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw PreconditionError("spearman inputs differ in length");
  if (x.size() < 3) throw PreconditionError("spearman needs at least 3 observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = (static_cast<double>(x.size()) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError("spearman undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::size_t FrequencyWeighting::bin_of(double frequency) const {
  const std::size_t n_bins = target_distribution.size();
  const double lo = std::log(bin_edges.front());
  const double hi = std::log(bin_edges.back());
  const double pos = (std::log(frequency) - lo) / (hi - lo) * static_cast<double>(n_bins);
  if (!(pos > 0.0)) return 0;
  return std::min(n_bins - 1, static_cast<std::size_t>(pos));
}

std::vector<double> FrequencyWeighting::weighted_mass(const std::string& sae_id,
                                                      const std::map<FeatureId, double>& freqs) const {
  std::vector<double> mass(target_distribution.size(), 0.0);
  const auto& w = weights.at(sae_id);
  double total = 0.0;
  for (const auto& [f, freq] : freqs) {
    const double wf = w.at(f);
    mass[bin_of(freq)] += wf;
    total += wf;
  }
  if (total > 0.0) {
    for (auto& m : mass) m /= total;
  }
  return mass;
}

FrequencyWeighting build_frequency_weighting(const SaeFrequencies& freqs, std::size_t n_bins) {
  if (freqs.size() < 2) throw PreconditionError("frequency weighting needs at least 2 SAEs");
  if (n_bins < 1) throw ConfigError("frequency weighting needs at least one bin");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& [sae, fs] : freqs) {
    if (fs.empty()) throw PreconditionError("SAE " + sae + " has no features to weight");
    for (const auto& [f, v] : fs) {
      if (!(v > 0.0)) {
        throw PreconditionError("SAE " + sae + " feature " + std::to_string(f) + " has non-positive frequency");
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (lo == hi) throw ConfigError("all frequencies are equal; log-spaced bins are degenerate");

  FrequencyWeighting w;
  w.bin_edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) {
    const double t = static_cast<double>(b) / static_cast<double>(n_bins);
    w.bin_edges[b] = std::exp(std::log(lo) + t * (std::log(hi) - std::log(lo)));
  }
  w.bin_edges.front() = lo;
  w.bin_edges.back() = hi;
  w.target_distribution.assign(n_bins, 0.0);

  for (const auto& [sae, fs] : freqs) {
    std::vector<double> mass(n_bins, 0.0);
    for (const auto& [f, v] : fs) mass[w.bin_of(v)] += 1.0;
    for (auto& m : mass) m /= static_cast<double>(fs.size());
    for (std::size_t b = 0; b < n_bins; ++b) w.target_distribution[b] += mass[b] / static_cast<double>(freqs.size());
    w.sae_mass[sae] = std::move(mass);
  }

  for (const auto& [sae, fs] : freqs) {
    const auto& mass = w.sae_mass[sae];
    auto& uncovered = w.uncovered_bins[sae];
    double achieved = 0.0;
    for (std::size_t b = 0; b < n_bins; ++b) {
      if (mass[b] > 0.0) {
        achieved += w.target_distribution[b];
      } else if (w.target_distribution[b] > 0.0) {
        uncovered.push_back(b);
      }
    }
    w.achieved_mass[sae] = achieved;
    if (!uncovered.empty()) {
      spdlog::warn("SAE {} has no features in {} bin(s) holding {:.4f} of the target mass", sae, uncovered.size(),
                   1.0 - achieved);
    }
    std::map<FeatureId, double> raw;
    double sum = 0.0;
    for (const auto& [f, v] : fs) {
      const std::size_t b = w.bin_of(v);
      const double wf = w.target_distribution[b] / mass[b];
      raw[f] = wf;
      sum += wf;
    }
    const double mean = sum / static_cast<double>(fs.size());
    for (auto& [f, wf] : raw) wf = mean > 0.0 ? wf / mean : 0.0;
    w.weights[sae] = std::move(raw);
  }
  return w;
}

const CorrelationEntry* SaeReport::correlation(const std::string& metric) const {
  for (const auto& c : correlations) {
    if (c.metric == metric) return &c;
  }
  return nullptr;
}

namespace {

CorrelationEntry correlate(const std::string& name, std::span<const SensitivityRecord* const> scored,
                           const std::map<FeatureId, double>& metric) {
  CorrelationEntry e;
  e.metric = name;
  std::vector<double> xs, ys;
  for (const SensitivityRecord* r : scored) {
    if (auto it = metric.find(r->feature_id); it != metric.end()) {
      xs.push_back(r->sensitivity);
      ys.push_back(it->second);
    }
  }
  e.n = xs.size();
  if (xs.size() < 3) {
    e.note = "fewer than 3 features";
    return e;
  }
  try {
    e.rho = spearman(xs, ys);
  } catch (const UndefinedMetricError& err) {
    e.note = err.what();
  }
  return e;
}

}  // namespace

SaeReport aggregate_sae(const SaeInfo& info, const AggregateInputs& in) {
  SaeReport rep;
  rep.info = info;
  rep.n_features_sampled = in.verdicts.size();
  std::map<FeatureId, bool> passed;
  for (const auto& v : in.verdicts) {
    passed[v.feature_id] = v.passed;
    if (v.passed) {
      ++rep.n_passed_filter;
    } else if (!v.enough_examples) {
      ++rep.n_excluded_count;
    } else {
      ++rep.n_excluded_truncation;
    }
  }
  rep.unevaluated = in.unevaluated;

  std::vector<const SensitivityRecord*> scored;
  for (const auto& r : in.records) {
    auto it = passed.find(r.feature_id);
    if (it != passed.end() && it->second) scored.push_back(&r);
  }
  std::sort(scored.begin(), scored.end(),
            [](const SensitivityRecord* a, const SensitivityRecord* b) { return a->feature_id < b->feature_id; });
  rep.n_scored = scored.size();

  rep.histogram.assign(10, 0);
  if (!scored.empty()) {
    double sum = 0.0;
    for (const SensitivityRecord* r : scored) {
      sum += r->sensitivity;
      rep.histogram[std::min<std::size_t>(9, static_cast<std::size_t>(r->sensitivity * 10.0))] += 1;
    }
    rep.mean_sensitivity = sum / static_cast<double>(scored.size());
  }
  if (in.weights && !scored.empty()) {
    double num = 0.0, den = 0.0;
    for (const SensitivityRecord* r : scored) {
      auto it = in.weights->find(r->feature_id);
      const double w = it == in.weights->end() ? 0.0 : it->second;
      num += w * r->sensitivity;
      den += w;
    }
    if (den > 0.0) rep.weighted_mean_sensitivity = num / den;
  }
  if (in.metrics) {
    rep.correlations.push_back(correlate("frequency", scored, in.metrics->frequency));
    rep.correlations.push_back(correlate("max_decoder_cosine", scored, in.metrics->max_cosine));
    rep.correlations.push_back(correlate("interp", scored, in.metrics->interp));
  }
  rep.overlap = in.overlap;
  return rep;
}

std::vector<FeatureId> interp_threshold_slice(std::span<const SensitivityRecord> records,
                                              const std::map<FeatureId, double>& interp_scores, double interp_min,
                                              double sens_max) {
  std::vector<FeatureId> out;
  for (const auto& r : records) {
    auto it = interp_scores.find(r.feature_id);
    if (it != interp_scores.end() && it->second >= interp_min && r.sensitivity <= sens_max) out.push_back(r.feature_id);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::map<FeatureId, double> read_interp_scores(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  std::istringstream in(raw);
  std::map<FeatureId, double> scores;
  std::string line;
  std::size_t offset = 0;
  bool first = true;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    for (char& c : line) {
      if (c == ',' || c == '\t' || c == '\r') c = ' ';
    }
    std::istringstream fields(line);
    std::string a, b;
    if (!(fields >> a)) continue;
    fields >> b;
    try {
      std::size_t used_a = 0, used_b = 0;
      const unsigned long id = std::stoul(a, &used_a);
      const double score = std::stod(b, &used_b);
      if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument("trailing characters");
      if (score < 0.0 || score > 1.0) {
        throw ValidationError("interp score " + b + " for feature " + a + " outside [0, 1]");
      }
      scores[static_cast<FeatureId>(id)] = score;
    } catch (const std::logic_error&) {
      if (!first) throw FormatError("malformed interp score line in " + path.string(), line_start);
    }
    first = false;
  }
  return scores;
}

namespace {
nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
}  // namespace

nlohmann::json to_json(const SaeReport& r) {
  nlohmann::json corr = nlohmann::json::array();
  for (const auto& c : r.correlations) {
    corr.push_back({{"metric", c.metric}, {"rho", opt(c.rho)}, {"n", c.n}, {"note", c.note}});
  }
  nlohmann::json unevaluated = nlohmann::json::array();
  for (const auto& u : r.unevaluated) unevaluated.push_back({{"feature_id", u.feature_id}, {"reason", u.reason}});
  nlohmann::json overlap = nlohmann::json::array();
  for (const auto& o : r.overlap) overlap.push_back(to_json(o));
  return {{"sae_id", r.info.sae_id},
          {"width", r.info.width},
          {"l0_label", r.info.l0_label},
          {"n_features_sampled", r.n_features_sampled},
          {"n_passed_filter", r.n_passed_filter},
          {"filter_statistics",
           {{"excluded_by_count", r.n_excluded_count},
            {"excluded_by_truncation", r.n_excluded_truncation},
            {"passed", r.n_passed_filter},
            {"attribution", "count criterion checked first"}}},
          {"n_scored", r.n_scored},
          {"unevaluated", std::move(unevaluated)},
          {"mean_sensitivity", opt(r.mean_sensitivity)},
          {"weighted_mean_sensitivity", opt(r.weighted_mean_sensitivity)},
          {"sensitivity_histogram", r.histogram},
          {"correlations", std::move(corr)},
          {"overlap", std::move(overlap)}};
}

nlohmann::json to_json(const FrequencyWeighting& w) {
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [sae, fw] : w.weights) {
    nlohmann::json m = nlohmann::json::array();
    for (const auto& [f, v] : fw) m.push_back({f, v});
    weights[sae] = std::move(m);
  }
  return {{"bin_edges", w.bin_edges},
          {"target_distribution", w.target_distribution},
          {"sae_mass", w.sae_mass},
          {"uncovered_bins", w.uncovered_bins},
          {"achieved_mass", w.achieved_mass},
          {"weights", std::move(weights)}};
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::optional<double> rho_of(const SaeReport& r, const std::string& metric) {
  const auto* c = r.correlation(metric);
  return c ? c->rho : std::nullopt;
}

}  // namespace

std::string summary_csv(std::span<const SaeReport> reports) {
  std::string out =
      "sae_id,width,l0,n_sampled,n_passed,mean_sensitivity,weighted_mean_sensitivity,rho_frequency,rho_cosine,"
      "rho_interp\n";
  for (const auto& r : reports) {
    out += r.info.sae_id + "," + std::to_string(r.info.width) + "," + r.info.l0_label + "," +
           std::to_string(r.n_features_sampled) + "," + std::to_string(r.n_passed_filter) + "," +
           fmt_opt(r.mean_sensitivity) + "," + fmt_opt(r.weighted_mean_sensitivity) + "," +
           fmt_opt(rho_of(r, "frequency")) + "," + fmt_opt(rho_of(r, "max_decoder_cosine")) + "," +
           fmt_opt(rho_of(r, "interp")) + "\n";
  }
  return out;
}

nlohmann::json summary_json(std::span<const SaeReport> reports) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reports) {
    rows.push_back({{"sae_id", r.info.sae_id},
                    {"width", r.info.width},
                    {"l0", r.info.l0_label},
                    {"n_sampled", r.n_features_sampled},
                    {"n_passed", r.n_passed_filter},
                    {"mean_sensitivity", opt(r.mean_sensitivity)},
                    {"weighted_mean_sensitivity", opt(r.weighted_mean_sensitivity)},
                    {"rho_frequency", opt(rho_of(r, "frequency"))},
                    {"rho_cosine", opt(rho_of(r, "max_decoder_cosine"))},
                    {"rho_interp", opt(rho_of(r, "interp"))}});
  }
  return {{"rows", std::move(rows)}};
}

}  // namespace saesens
