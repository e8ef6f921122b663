#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tmb {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// One `[name]` block of a key=value file. Entries before the first header
/// land in a section with an empty name.
struct ConfigSection {
  std::string name;
  std::size_t line = 0;
  std::vector<ConfigEntry> entries;
};

std::vector<ConfigSection> parse_config_text(const std::string& text);

// Typed accessors; all throw ConfigError mentioning the line on bad input.
double config_double(const ConfigEntry& e);
std::int64_t config_int(const ConfigEntry& e);
std::size_t config_size(const ConfigEntry& e);
std::uint64_t config_u64(const ConfigEntry& e);
bool config_bool(const ConfigEntry& e);
[[noreturn]] void config_unknown_key(const ConfigEntry& e, const std::string& section);

/// Shortest decimal that round-trips to the same double.
std::string format_double(double v);

}  // namespace tmb
