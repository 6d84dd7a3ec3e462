#include "aqt/keyvalue.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <set>

namespace aqt {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues entries;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto end = text.find('\n');
    const auto raw = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    const auto line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) throw ConfigError("duplicate key '" + key + "'");
    entries.emplace_back(std::move(key), std::move(value));
  }
  return entries;
}

std::string format_key_values(const KeyValues& entries) {
  std::string out;
  for (const auto& [key, value] : entries) out += key + " = " + value + "\n";
  return out;
}

std::string format_double(double value) {
  std::array<char, 64> buffer{};
  const auto [end, ec] = std::to_chars(buffer.data(), buffer.data() + buffer.size(), value);
  if (ec != std::errc{}) throw ConfigError("cannot format number");
  return std::string(buffer.data(), end);
}

double parse_double(const std::string& key, const std::string& text) {
  double value = 0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto [end, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || end != last || !std::isfinite(value)) {
    throw ConfigError("'" + key + "': expected a finite number, got '" + text + "'");
  }
  return value;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  // Accept scientific shorthand such as 2e5 for step counts.
  if (text.find_first_of("eE.") != std::string::npos) {
    const double value = parse_double(key, text);
    if (value < 0 || value != std::floor(value) || value > 1.8e19) {
      throw ConfigError("'" + key + "': expected a non-negative integer, got '" + text + "'");
    }
    return static_cast<std::uint64_t>(value);
  }
  std::uint64_t value = 0;
  const auto* last = text.data() + text.size();
  const auto [end, ec] = std::from_chars(text.data(), last, value);
  if (ec != std::errc{} || end != last) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + text + "'");
  }
  return value;
}

std::size_t parse_size(const std::string& key, const std::string& text) {
  return static_cast<std::size_t>(parse_u64(key, text));
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + text + "'");
}

}  // namespace aqt
