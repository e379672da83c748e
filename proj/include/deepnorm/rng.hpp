#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace deepnorm {

// Counter-based generator: output i of a stream is mix(key + i * gamma).
// split() derives an independent stream from a name, so per-parameter
// sequences do not depend on the order in which parameters are initialized.
// Satisfies UniformRandomBitGenerator for use with <random> distributions.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  Rng split(std::string_view name) const;
  Rng split(std::uint64_t index) const;

  result_type operator()();
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  // Uniform on the open interval (0, 1), 53 random bits.
  double uniform_open();
  // Uniform on (-bound, +bound).
  double symmetric(double bound);
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace deepnorm
