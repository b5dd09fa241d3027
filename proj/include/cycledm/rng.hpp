#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "cycledm/tensor.hpp"

namespace cycledm {

// Deterministic random stream. Every stochastic operation takes one of these
// explicitly; named sub-streams are derived by hashing so that adding a
// consumer of one stream never perturbs another.
class RngStream {
 public:
  explicit RngStream(uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  // Stream `name` under root seed `root`.
  static RngStream derive(uint64_t root, std::string_view name);
  RngStream fork(std::string_view name) const { return derive(seed_, name); }

  uint64_t seed() const { return seed_; }

  double uniform();                       // [0, 1)
  int uniform_int(int lo, int hi);        // inclusive
  float normal();
  Tensor normal_tensor(const Shape& shape);
  Tensor uniform_tensor(const Shape& shape, float lo, float hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
};

uint64_t mix_seed(uint64_t root, std::string_view name);

}  // namespace cycledm
