#pragma once

// Strict typed accessors for config JSON.

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "deepnorm/errors.hpp"

namespace deepnorm::json_fields {

inline void require_object(const nlohmann::json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected a JSON object");
}

inline std::size_t as_size(const nlohmann::json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
  throw ConfigError(key + ": expected a non-negative integer");
}

inline std::uint64_t as_u64(const nlohmann::json& v, const std::string& key) {
  return static_cast<std::uint64_t>(as_size(v, key));
}

inline double as_double(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError(key + ": expected a number");
  return v.get<double>();
}

inline bool as_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
  return v.get<bool>();
}

inline std::string as_string(const nlohmann::json& v, const std::string& key) {
  if (!v.is_string()) throw ConfigError(key + ": expected a string");
  return v.get<std::string>();
}

}  // namespace deepnorm::json_fields
