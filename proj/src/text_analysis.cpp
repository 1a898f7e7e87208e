#include "saesens/text_analysis.hpp"

#include <algorithm>

#include "saesens/error.hpp"

namespace saesens {

std::string to_string(OverlapKind kind) {
  switch (kind) {
    case OverlapKind::activating_activating: return "activating_activating";
    case OverlapKind::generated_activating: return "generated_activating";
    case OverlapKind::generated_generated: return "generated_generated";
  }
  return "unknown";
}

namespace {

// Rolling-row DP over a[0, a_end) x b.
std::size_t lcs_prefix(std::span<const TokenId> a, std::size_t a_end, std::span<const TokenId> b) {
  if (a_end == 0 || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  std::size_t best = 0;
  for (std::size_t i = 1; i <= a_end; ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : 0;
      best = std::max(best, cur[j]);
    }
    std::swap(prev, cur);
  }
  return best;
}

}  // namespace

std::size_t lcs_tokens(std::span<const TokenId> a, std::span<const TokenId> b) { return lcs_prefix(a, a.size(), b); }

std::size_t lcs_ending_on_activation(const ActivatingExample& a, std::span<const TokenId> b) {
  const std::size_t last = a.last_marked_token();
  return lcs_prefix(a.tokens, std::min(last + 1, a.tokens.size()), b);
}

OverlapStats overlap_ccdf_from_lengths(std::span<const std::size_t> lengths, OverlapKind kind, std::size_t max_n) {
  if (lengths.empty()) throw PreconditionError("overlap CCDF needs at least one pair");
  OverlapStats s;
  s.kind = kind;
  s.pair_count = lengths.size();
  s.ccdf.assign(max_n, 0.0);
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto hits = std::count_if(lengths.begin(), lengths.end(), [n](std::size_t l) { return l >= n; });
    s.ccdf[n - 1] = static_cast<double>(hits) / static_cast<double>(lengths.size());
  }
  return s;
}

OverlapStats overlap_ccdf(std::span<const TokenPair> pairs, OverlapKind kind, std::size_t max_n) {
  std::vector<std::size_t> lengths;
  lengths.reserve(pairs.size());
  for (const auto& [a, b] : pairs) lengths.push_back(lcs_tokens(a, b));
  return overlap_ccdf_from_lengths(lengths, kind, max_n);
}

FeatureOverlap feature_overlap(std::span<const ActivatingExample* const> examples,
                               std::span<const std::vector<TokenId>> generated) {
  FeatureOverlap out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (std::size_t j = i + 1; j < examples.size(); ++j) {
      out.activating_activating.push_back(lcs_tokens(examples[i]->tokens, examples[j]->tokens));
    }
  }
  for (const auto& g : generated) {
    for (const ActivatingExample* ex : examples) {
      out.generated_activating.push_back(ex->marker_spans.empty() ? lcs_tokens(ex->tokens, g)
                                                                  : lcs_ending_on_activation(*ex, g));
    }
  }
  for (std::size_t i = 0; i < generated.size(); ++i) {
    for (std::size_t j = i + 1; j < generated.size(); ++j) {
      out.generated_generated.push_back(lcs_tokens(generated[i], generated[j]));
    }
  }
  return out;
}

nlohmann::json to_json(const OverlapStats& s) {
  nlohmann::json ccdf = nlohmann::json::array();
  for (std::size_t n = 1; n <= s.ccdf.size(); ++n) ccdf.push_back({{"n", n}, {"fraction", s.ccdf[n - 1]}});
  return {{"kind", to_string(s.kind)}, {"pair_count", s.pair_count}, {"ccdf", std::move(ccdf)}};
}

}  // namespace saesens
