#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace aqt {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped. Duplicate keys are rejected.
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& entries);

/// Shortest text that round-trips to the same double.
std::string format_double(double value);
double parse_double(const std::string& key, const std::string& text);
std::size_t parse_size(const std::string& key, const std::string& text);
std::uint64_t parse_u64(const std::string& key, const std::string& text);
bool parse_bool(const std::string& key, const std::string& text);

}  // namespace aqt
