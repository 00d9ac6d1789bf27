#pragma once

// Line-oriented `key = value` files with `#` comments.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rmx/tensor.hpp"

namespace rmx {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

/// Parses config text. Blank lines and `#` comments are skipped; duplicate keys
/// keep the last value.
std::vector<ConfigEntry> parse_config(const std::string& text, const std::string& origin = "<config>");
std::vector<ConfigEntry> read_config_file(const std::string& path);

namespace cfg {
std::int64_t to_int(const ConfigEntry& e);
double to_double(const ConfigEntry& e);
bool to_bool(const ConfigEntry& e);
std::uint64_t to_u64(const ConfigEntry& e);
/// Shortest text that parses back to the same double.
std::string format(double v);
}  // namespace cfg

}  // namespace rmx
