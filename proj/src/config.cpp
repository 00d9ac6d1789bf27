#include "rmx/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace rmx {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const ConfigEntry& e, const char* kind) {
  throw ConfigError("config line " + std::to_string(e.line) + ": '" + e.key + "' expects " + kind + ", got '" +
                    e.value + "'");
}

}  // namespace

std::vector<ConfigEntry> parse_config(const std::string& text, const std::string& origin) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected 'key = value', got '" + line + "'");
    }
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n};
    if (e.key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
    auto it = std::find_if(out.begin(), out.end(), [&](const ConfigEntry& x) { return x.key == e.key; });
    if (it != out.end()) {
      *it = e;
    } else {
      out.push_back(e);
    }
  }
  return out;
}

std::vector<ConfigEntry> read_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

namespace cfg {

std::int64_t to_int(const ConfigEntry& e) {
  std::int64_t v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size()) bad_value(e, "an integer");
  return v;
}

std::uint64_t to_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size()) bad_value(e, "a non-negative integer");
  return v;
}

double to_double(const ConfigEntry& e) {
  try {
    std::size_t pos = 0;
    double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) bad_value(e, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(e, "a number");
  }
}

bool to_bool(const ConfigEntry& e) {
  std::string v = e.value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(e, "a boolean");
}

std::string format(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace cfg

}  // namespace rmx
