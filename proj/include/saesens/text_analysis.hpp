#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "saesens/examples.hpp"

namespace saesens {

enum class OverlapKind { activating_activating, generated_activating, generated_generated };
std::string to_string(OverlapKind kind);

struct OverlapStats {
  OverlapKind kind = OverlapKind::activating_activating;
  std::size_t pair_count = 0;
  std::vector<double> ccdf;  // ccdf[n - 1] = fraction of pairs with LCS >= n, n = 1..max_n
};

// Longest run of token ids common to both lists. O(|a|*|b|) time, O(|b|) memory.
std::size_t lcs_tokens(std::span<const TokenId> a, std::span<const TokenId> b);

// Longest common substring whose end in `a` is at or before a's last
// activating token. Throws PreconditionError when `a` has no marker.
std::size_t lcs_ending_on_activation(const ActivatingExample& a, std::span<const TokenId> b);

OverlapStats overlap_ccdf_from_lengths(std::span<const std::size_t> lengths, OverlapKind kind,
                                       std::size_t max_n = 10);

using TokenPair = std::pair<std::vector<TokenId>, std::vector<TokenId>>;
OverlapStats overlap_ccdf(std::span<const TokenPair> pairs, OverlapKind kind, std::size_t max_n = 10);

// LCS lengths for the three comparison kinds within one feature:
// activating pairs (i < j), generated x activating (activation-anchored on
// the activating side), and generated pairs (i < j).
struct FeatureOverlap {
  std::vector<std::size_t> activating_activating;
  std::vector<std::size_t> generated_activating;
  std::vector<std::size_t> generated_generated;
};

FeatureOverlap feature_overlap(std::span<const ActivatingExample* const> examples,
                               std::span<const std::vector<TokenId>> generated);

nlohmann::json to_json(const OverlapStats& s);

}  // namespace saesens
