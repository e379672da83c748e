#pragma once

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace deepnorm {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Shortest round-trip decimal form ('.' separator, locale independent).
std::string format_double(double value);

// Writes via a temporary file and rename, so readers never see a partial file.
void write_text_file(const std::string& path, std::string_view content);

// Pretty JSON with a trailing newline.
std::string dump_json(const nlohmann::json& j);

}  // namespace deepnorm
