#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "saesens/examples.hpp"
#include "saesens/sae.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("saesens-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path data_dir() { return std::filesystem::path(SAESENS_TEST_DATA_DIR); }

// Example window from texts and per-token activations; markers are maximal positive runs.
inline saesens::ActivatingExample make_example(const std::vector<std::string>& texts,
                                               const std::vector<float>& acts) {
  saesens::ActivatingExample e;
  e.texts = texts;
  e.activations = acts;
  for (std::size_t i = 0; i < texts.size(); ++i) e.tokens.push_back(static_cast<saesens::TokenId>(i));
  for (std::size_t i = 0; i < acts.size();) {
    if (acts[i] > 0) {
      std::size_t j = i;
      while (j < acts.size() && acts[j] > 0) ++j;
      e.marker_spans.push_back({i, j});
      i = j;
    } else {
      ++i;
    }
  }
  for (std::size_t i = 0; i < acts.size(); ++i) {
    if (acts[i] > e.peak_activation) {
      e.peak_activation = acts[i];
      e.peak_position = i;
    }
  }
  return e;
}

// Random SAE of the given variant with weights in [-1, 1).
inline saesens::SaeModel random_sae(saesens::SaeVariant variant, std::size_t width, std::size_t d_model,
                                    std::mt19937_64& gen) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  saesens::SaeModel m;
  m.variant = variant;
  m.width = width;
  m.d_model = d_model;
  auto fill = [&](std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = u(gen);
    return v;
  };
  m.w_enc = saesens::Matrix(width, d_model, fill(width * d_model));
  m.w_dec = saesens::Matrix(width, d_model, fill(width * d_model));
  m.b_enc = fill(width);
  m.b_dec = fill(d_model);
  using saesens::SaeVariant;
  if (variant == SaeVariant::jumprelu) {
    m.theta = fill(width);
    for (auto& t : m.theta) t = std::abs(t);
  }
  if (variant == SaeVariant::gated) {
    m.r_mag = fill(width);
    m.b_mag = fill(width);
  }
  if (variant == SaeVariant::topk || variant == SaeVariant::matryoshka_topk || variant == SaeVariant::batchtopk) {
    m.k = 1 + gen() % width;
  }
  if (variant == SaeVariant::batchtopk && gen() % 2 == 0) {
    m.theta = fill(width);
    for (auto& t : m.theta) t = std::abs(t) * 0.5f;
  }
  m.validate();
  return m;
}

}  // namespace testing
