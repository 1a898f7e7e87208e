#pragma once

#include <cstdint>
#include <random>

namespace saesens {

// Seeded generator with platform-independent output. std::mt19937_64's raw
// stream is fixed by the standard; the distributions in <random> are not, so
// bounded integers, uniforms and normals are derived here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  // Uniform double in [0, 1).
  double uniform();

  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Combines a run seed with a stream key (feature id, token id, ...) so that
// independent consumers draw from decorrelated streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key);

}  // namespace saesens
