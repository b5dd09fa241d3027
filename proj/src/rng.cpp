#include "cycledm/rng.hpp"

namespace cycledm {

uint64_t mix_seed(uint64_t root, std::string_view name) {
  // FNV-1a over the name, then a splitmix64 finalizer with the root.
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  uint64_t z = root + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

RngStream RngStream::derive(uint64_t root, std::string_view name) { return RngStream(mix_seed(root, name)); }

double RngStream::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

int RngStream::uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

float RngStream::normal() { return normal_(engine_); }

Tensor RngStream::normal_tensor(const Shape& shape) {
  Tensor t(shape);
  for (auto& v : t.data()) v = normal_(engine_);
  return t;
}

Tensor RngStream::uniform_tensor(const Shape& shape, float lo, float hi) {
  Tensor t(shape);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (auto& v : t.data()) v = dist(engine_);
  return t;
}

}  // namespace cycledm
