#include "saesens/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "saesens/error.hpp"

namespace saesens {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) throw ShapeError("matrix data does not match its shape");
}

SaeVariant parse_sae_variant(const std::string& name) {
  if (name == "relu") return SaeVariant::relu;
  if (name == "jumprelu") return SaeVariant::jumprelu;
  if (name == "topk") return SaeVariant::topk;
  if (name == "batchtopk") return SaeVariant::batchtopk;
  if (name == "gated") return SaeVariant::gated;
  if (name == "p_anneal") return SaeVariant::p_anneal;
  if (name == "matryoshka_topk") return SaeVariant::matryoshka_topk;
  throw LoadError("unknown SAE variant '" + name + "'");
}

std::string to_string(SaeVariant v) {
  switch (v) {
    case SaeVariant::relu: return "relu";
    case SaeVariant::jumprelu: return "jumprelu";
    case SaeVariant::topk: return "topk";
    case SaeVariant::batchtopk: return "batchtopk";
    case SaeVariant::gated: return "gated";
    case SaeVariant::p_anneal: return "p_anneal";
    case SaeVariant::matryoshka_topk: return "matryoshka_topk";
  }
  return "unknown";
}

namespace {

std::string dims(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + ", " + std::to_string(c) + "]";
}

void check_vec(const std::vector<float>& v, std::size_t n, const char* name) {
  if (v.size() != n) {
    throw LoadError(std::string("dimension mismatch: ") + name + " has shape [" + std::to_string(v.size()) +
                    "], expected [" + std::to_string(n) + "]");
  }
}

bool uses_topk(const SaeModel& m) {
  return m.variant == SaeVariant::topk || m.variant == SaeVariant::matryoshka_topk ||
         (m.variant == SaeVariant::batchtopk && m.theta.empty());
}

}  // namespace

void SaeModel::validate() const {
  if (width == 0 || d_model == 0) throw LoadError("SAE width and d_model must be positive");
  if (w_enc.rows() != width || w_enc.cols() != d_model) {
    throw LoadError("dimension mismatch: W_enc has shape " + dims(w_enc.rows(), w_enc.cols()) + ", expected " +
                    dims(width, d_model));
  }
  if (w_dec.rows() != width || w_dec.cols() != d_model) {
    throw LoadError("dimension mismatch: W_dec has shape " + dims(w_dec.rows(), w_dec.cols()) + ", expected " +
                    dims(width, d_model));
  }
  check_vec(b_enc, width, "b_enc");
  check_vec(b_dec, d_model, "b_dec");
  switch (variant) {
    case SaeVariant::jumprelu:
      if (theta.empty()) throw LoadError("missing tensor: theta");
      check_vec(theta, width, "theta");
      break;
    case SaeVariant::batchtopk:
      if (!theta.empty()) {
        check_vec(theta, width, "threshold");
        break;
      }
      [[fallthrough]];
    case SaeVariant::topk:
    case SaeVariant::matryoshka_topk:
      if (!k) throw LoadError("missing k for variant " + to_string(variant));
      if (*k < 1 || *k > width) {
        throw LoadError("k = " + std::to_string(*k) + " outside [1, " + std::to_string(width) + "]");
      }
      break;
    case SaeVariant::gated:
      if (r_mag.empty()) throw LoadError("missing tensor: r_mag");
      if (b_mag.empty()) throw LoadError("missing tensor: b_mag");
      check_vec(r_mag, width, "r_mag");
      check_vec(b_mag, width, "b_mag");
      break;
    case SaeVariant::relu:
    case SaeVariant::p_anneal:
      break;
  }
}

std::string SaeModel::inference_rule() const {
  if (variant == SaeVariant::batchtopk) return theta.empty() ? "topk" : "threshold";
  return to_string(variant);
}

SaeModel sae_from_tensors(const TensorFile& file) {
  auto meta = file.metadata.find("variant");
  if (meta == file.metadata.end()) throw LoadError("missing metadata: variant");
  SaeModel m;
  m.variant = parse_sae_variant(meta->second);
  if (auto l0 = file.metadata.find("l0_label"); l0 != file.metadata.end()) m.l0_label = l0->second;

  auto require = [&](const std::string& name) -> const Tensor& {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw LoadError("missing tensor: " + name);
    return it->second;
  };
  auto as_matrix = [](const std::string& name, const Tensor& t) {
    if (t.shape.size() != 2) throw LoadError("tensor " + name + " must be 2-D, got " + t.shape_string());
    return Matrix(static_cast<std::size_t>(t.shape[0]), static_cast<std::size_t>(t.shape[1]), t.values);
  };
  auto as_vector = [](const std::string& name, const Tensor& t) {
    if (t.shape.size() != 1) throw LoadError("tensor " + name + " must be 1-D, got " + t.shape_string());
    return t.values;
  };

  m.w_enc = as_matrix("W_enc", require("W_enc"));
  m.w_dec = as_matrix("W_dec", require("W_dec"));
  m.b_enc = as_vector("b_enc", require("b_enc"));
  m.b_dec = as_vector("b_dec", require("b_dec"));
  m.width = m.w_enc.rows();
  m.d_model = m.w_enc.cols();

  auto find = [&](const std::string& name) -> const Tensor* {
    auto it = file.tensors.find(name);
    return it == file.tensors.end() ? nullptr : &it->second;
  };
  auto read_k = [&]() -> std::optional<std::size_t> {
    double raw;
    if (auto it = file.metadata.find("k"); it != file.metadata.end()) {
      try {
        raw = std::stod(it->second);
      } catch (const std::exception&) {
        throw LoadError("metadata k is not a number: " + it->second);
      }
    } else if (const Tensor* t = find("k")) {
      if (t->values.size() != 1) throw LoadError("tensor k must be a scalar");
      raw = t->values[0];
    } else {
      return std::nullopt;
    }
    if (raw < 0 || raw != std::floor(raw)) throw LoadError("k must be a non-negative integer");
    return static_cast<std::size_t>(raw);
  };

  switch (m.variant) {
    case SaeVariant::jumprelu: {
      const Tensor* t = find("theta");
      if (!t) t = find("threshold");
      if (!t) throw LoadError("missing tensor: theta");
      m.theta = t->values;
      break;
    }
    case SaeVariant::batchtopk:
      if (const Tensor* t = find("threshold")) {
        m.theta = t->values.size() == 1 ? std::vector<float>(m.width, t->values[0]) : t->values;
      }
      m.k = read_k();
      break;
    case SaeVariant::topk:
    case SaeVariant::matryoshka_topk:
      m.k = read_k();
      break;
    case SaeVariant::gated:
      m.r_mag = as_vector("r_mag", require("r_mag"));
      m.b_mag = as_vector("b_mag", require("b_mag"));
      break;
    default:
      break;
  }
  m.validate();
  return m;
}

SaeModel load_sae(const std::filesystem::path& path) { return sae_from_tensors(read_safetensors(path)); }

TensorFile sae_to_tensors(const SaeModel& m) {
  m.validate();
  TensorFile f;
  const auto w = static_cast<std::int64_t>(m.width);
  const auto d = static_cast<std::int64_t>(m.d_model);
  f.metadata["variant"] = to_string(m.variant);
  if (!m.l0_label.empty()) f.metadata["l0_label"] = m.l0_label;
  f.tensors["W_enc"] = Tensor{{w, d}, m.w_enc.data()};
  f.tensors["W_dec"] = Tensor{{w, d}, m.w_dec.data()};
  f.tensors["b_enc"] = Tensor{{w}, m.b_enc};
  f.tensors["b_dec"] = Tensor{{d}, m.b_dec};
  if (m.k) f.metadata["k"] = std::to_string(*m.k);
  if (!m.theta.empty()) f.tensors[m.variant == SaeVariant::jumprelu ? "theta" : "threshold"] = Tensor{{w}, m.theta};
  if (m.variant == SaeVariant::gated) {
    f.tensors["r_mag"] = Tensor{{w}, m.r_mag};
    f.tensors["b_mag"] = Tensor{{w}, m.b_mag};
  }
  return f;
}

void save_sae(const std::filesystem::path& path, const SaeModel& model) {
  write_safetensors(path, sae_to_tensors(model));
}

bool FeatureActivations::any_active(std::size_t column) const {
  for (std::size_t t = 0; t < values.rows(); ++t) {
    if (values(t, column) > 0.0f) return true;
  }
  return false;
}

float FeatureActivations::peak(std::size_t column) const {
  float best = 0.0f;
  for (std::size_t t = 0; t < values.rows(); ++t) best = std::max(best, values(t, column));
  return best;
}

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

// Applies the row-local rule for feature j given its encoder projection x.W_enc[j].
float row_local(const SaeModel& m, std::size_t j, double proj) {
  const double z = proj + m.b_enc[j];
  switch (m.variant) {
    case SaeVariant::relu:
    case SaeVariant::p_anneal:
      return static_cast<float>(std::max(z, 0.0));
    case SaeVariant::jumprelu:
    case SaeVariant::batchtopk:
      return z > m.theta[j] ? static_cast<float>(std::max(z, 0.0)) : 0.0f;
    case SaeVariant::gated: {
      if (z <= 0.0) return 0.0f;
      const double mag = proj * std::exp(static_cast<double>(m.r_mag[j])) + m.b_mag[j];
      return static_cast<float>(std::max(mag, 0.0));
    }
    default:
      return 0.0f;
  }
}

// Top-k over one row of pre-activations; ties go to the lower feature index.
void topk_row(std::span<const double> z, std::size_t k, std::span<float> out) {
  std::vector<std::size_t> idx(z.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto kk = static_cast<std::ptrdiff_t>(std::min(k, z.size()));
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](std::size_t a, std::size_t b) {
    return z[a] != z[b] ? z[a] > z[b] : a < b;
  });
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::ptrdiff_t i = 0; i < kk; ++i) out[idx[i]] = static_cast<float>(std::max(z[idx[i]], 0.0));
}

void check_input(const SaeModel& m, const Matrix& acts) {
  if (acts.cols() != m.d_model) {
    throw ShapeError("activations have " + std::to_string(acts.cols()) + " columns, SAE d_model is " +
                     std::to_string(m.d_model));
  }
}

}  // namespace

Matrix encode(const SaeModel& model, const Matrix& activations) {
  check_input(model, activations);
  Matrix out(activations.rows(), model.width);
  std::vector<double> z(model.width);
  for (std::size_t t = 0; t < activations.rows(); ++t) {
    const auto x = activations.row(t);
    if (uses_topk(model)) {
      for (std::size_t j = 0; j < model.width; ++j) z[j] = dot(x, model.w_enc.row(j)) + model.b_enc[j];
      topk_row(z, *model.k, out.row(t));
    } else {
      for (std::size_t j = 0; j < model.width; ++j) out(t, j) = row_local(model, j, dot(x, model.w_enc.row(j)));
    }
  }
  return out;
}

FeatureActivations encode_features(const SaeModel& model, const Matrix& activations,
                                   std::span<const FeatureId> feature_ids) {
  check_input(model, activations);
  for (FeatureId f : feature_ids) {
    if (f >= model.width) throw ShapeError("feature id " + std::to_string(f) + " >= SAE width");
  }
  FeatureActivations result;
  result.feature_ids.assign(feature_ids.begin(), feature_ids.end());
  result.values = Matrix(activations.rows(), feature_ids.size());
  if (feature_ids.empty()) return result;
  if (uses_topk(model)) {
    const Matrix full = encode(model, activations);
    for (std::size_t t = 0; t < activations.rows(); ++t) {
      for (std::size_t c = 0; c < feature_ids.size(); ++c) result.values(t, c) = full(t, feature_ids[c]);
    }
    return result;
  }
  for (std::size_t t = 0; t < activations.rows(); ++t) {
    const auto x = activations.row(t);
    for (std::size_t c = 0; c < feature_ids.size(); ++c) {
      const FeatureId j = feature_ids[c];
      result.values(t, c) = row_local(model, j, dot(x, model.w_enc.row(j)));
    }
  }
  return result;
}

double max_decoder_cosine(const SaeModel& model, FeatureId feature_id) {
  if (model.width < 2) throw UndefinedMetricError("max decoder cosine needs at least 2 features");
  if (feature_id >= model.width) throw ShapeError("feature id " + std::to_string(feature_id) + " >= SAE width");
  const auto self = model.w_dec.row(feature_id);
  const double self_norm = std::sqrt(dot(self, self));
  if (self_norm == 0.0) {
    throw UndefinedMetricError("decoder row of feature " + std::to_string(feature_id) + " has zero norm");
  }
  double best = -1.0;
  for (std::size_t j = 0; j < model.width; ++j) {
    if (j == feature_id) continue;
    const auto other = model.w_dec.row(j);
    const double norm = std::sqrt(dot(other, other));
    if (norm == 0.0) continue;
    best = std::max(best, std::clamp(dot(self, other) / (self_norm * norm), -1.0, 1.0));
  }
  return best;
}

}  // namespace saesens
