#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace deepnorm {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kFirstContentId = 3;

// Row-major [batch, len] token ids.
struct Tokens {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;

  static Tokens filled(std::size_t batch, std::size_t len, std::int32_t value = kPadId) {
    return Tokens{batch, len, std::vector<std::int32_t>(batch * len, value)};
  }

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * len + t]; }
  std::int32_t& at(std::size_t b, std::size_t t) { return ids[b * len + t]; }
  std::span<const std::int32_t> row(std::size_t b) const { return {ids.data() + b * len, len}; }
};

}  // namespace deepnorm
