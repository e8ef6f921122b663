#include "tmblock/config_text.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <sstream>

namespace tmb {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const ConfigEntry& e, const char* what) {
  throw ConfigError("line " + std::to_string(e.line) + ": '" + e.key + "' expects " + what +
                    ", got '" + e.value + "'");
}

}  // namespace

std::vector<ConfigSection> parse_config_text(const std::string& text) {
  std::vector<ConfigSection> sections(1);
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header '" +
                          line + "'");
      }
      sections.push_back({trim(line.substr(1, line.size() - 2)), line_no, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" + line +
                        "'");
    }
    ConfigEntry entry{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no};
    if (entry.key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    for (const auto& other : sections.back().entries) {
      if (other.key == entry.key) {
        throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + entry.key +
                          "' (first on line " + std::to_string(other.line) + ")");
      }
    }
    sections.back().entries.push_back(std::move(entry));
  }
  return sections;
}

double config_double(const ConfigEntry& e) {
  double v = 0.0;
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || !std::isfinite(v)) bad_value(e, "a finite number");
  return v;
}

std::int64_t config_int(const ConfigEntry& e) {
  std::int64_t v = 0;
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) bad_value(e, "an integer");
  return v;
}

std::size_t config_size(const ConfigEntry& e) {
  const auto v = config_int(e);
  if (v < 0) bad_value(e, "a non-negative integer");
  return static_cast<std::size_t>(v);
}

std::uint64_t config_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) bad_value(e, "an unsigned integer");
  return v;
}

bool config_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  bad_value(e, "true or false");
}

void config_unknown_key(const ConfigEntry& e, const std::string& section) {
  throw ConfigError("line " + std::to_string(e.line) + ": unknown key '" + e.key + "' in " +
                    (section.empty() ? std::string("top level") : "[" + section + "]"));
}

std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

}  // namespace tmb
