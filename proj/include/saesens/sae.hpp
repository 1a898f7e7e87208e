#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saesens/tensor_file.hpp"

namespace saesens {

using FeatureId = std::uint32_t;

// Dense row-major float32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<float>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

enum class SaeVariant { relu, jumprelu, topk, batchtopk, gated, p_anneal, matryoshka_topk };

SaeVariant parse_sae_variant(const std::string& name);
std::string to_string(SaeVariant v);

// Encoder/decoder weights. W_enc and W_dec are both width x d_model; rows of
// W_dec are decoder directions.
//
// Tensor names in the weight file (safetensors; "variant" in __metadata__):
//   all variants     W_enc [M, d], b_enc [M], W_dec [M, d], b_dec [d]
//   jumprelu         theta [M] (alias "threshold")
//   topk, matryoshka k: metadata "k" or scalar tensor "k"
//   batchtopk        "threshold" ([M] or scalar) if present, else k as topk
//   gated            r_mag [M], b_mag [M]; b_enc is the gate bias
// Optional metadata: "l0_label".
struct SaeModel {
  SaeVariant variant = SaeVariant::relu;
  std::size_t width = 0;
  std::size_t d_model = 0;
  Matrix w_enc;
  std::vector<float> b_enc;
  Matrix w_dec;
  std::vector<float> b_dec;
  std::vector<float> theta;  // jumprelu thresholds, or batchtopk inference threshold
  std::optional<std::size_t> k;
  std::vector<float> r_mag;  // gated only
  std::vector<float> b_mag;  // gated only
  std::string l0_label;

  // Throws LoadError when dimensions or variant requirements are inconsistent.
  void validate() const;

  // "threshold" or "topk" for batchtopk; the variant name otherwise.
  std::string inference_rule() const;
};

SaeModel load_sae(const std::filesystem::path& path);
SaeModel sae_from_tensors(const TensorFile& file);
TensorFile sae_to_tensors(const SaeModel& model);
void save_sae(const std::filesystem::path& path, const SaeModel& model);

// Per-token activations for a selection of features.
struct FeatureActivations {
  std::vector<FeatureId> feature_ids;
  Matrix values;  // T x feature_ids.size(), non-negative

  bool active(std::size_t token, std::size_t column) const { return values(token, column) > 0.0f; }
  bool any_active(std::size_t column) const;
  float peak(std::size_t column) const;
};

// Full T x width encoder output.
Matrix encode(const SaeModel& model, const Matrix& activations);

// Encoder output restricted to the given features. Row-local variants only
// compute the requested columns; top-k variants need the whole row.
FeatureActivations encode_features(const SaeModel& model, const Matrix& activations,
                                   std::span<const FeatureId> feature_ids);

// Max cosine similarity between feature `feature_id`'s decoder row and any
// other decoder row.
double max_decoder_cosine(const SaeModel& model, FeatureId feature_id);

}  // namespace saesens
