#include "deepnorm/rng.hpp"

namespace deepnorm {

namespace {

constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over the name, then mixed.
std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix64(h);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : key_(mix64(seed + kGamma)), counter_(0) {}

Rng Rng::split(std::string_view name) const { return Rng(mix64(key_ ^ hash_name(name)), 0); }

Rng Rng::split(std::uint64_t index) const { return Rng(mix64(key_ ^ mix64(index * kGamma + 1)), 0); }

Rng::result_type Rng::operator()() { return mix64(key_ + (++counter_) * kGamma); }

double Rng::uniform_open() {
  // (k + 0.5) / 2^53 for k in [0, 2^53) never hits 0 or 1.
  const auto k = (*this)() >> 11;
  return (static_cast<double>(k) + 0.5) * 0x1.0p-53;
}

double Rng::symmetric(double bound) {
  // 2u - 1 is exact for u of the form above.
  return bound * (2.0 * uniform_open() - 1.0);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection to avoid modulo bias.
  const std::uint64_t limit = max() - (max() % n);
  std::uint64_t v;
  do {
    v = (*this)();
  } while (v >= limit);
  return v % n;
}

}  // namespace deepnorm
