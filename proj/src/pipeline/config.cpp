#include "efl/config.hpp"

#include "efl/error.hpp"
#include "efl/io.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace efl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::pair<std::string, std::string> split_assignment(const std::string& line) {
  const auto eq = line.find('=');
  EFL_CHECK(eq != std::string::npos, Errc::config, "expected key = value, got '" + line + "'");
  std::string key = trim(line.substr(0, eq));
  EFL_CHECK(!key.empty(), Errc::config, "empty key in '" + line + "'");
  return {key, trim(line.substr(eq + 1))};
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto [k, v] = split_assignment(line);
    cfg.values_[k] = v;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  try {
    return parse(io::read_file(path));
  } catch (const Error& e) {
    if (e.code() == Errc::io) throw Error(Errc::config, "cannot read config " + path.string());
    throw;
  }
}

void KeyValueConfig::apply_override(const std::string& assignment) {
  auto [k, v] = split_assignment(assignment);
  values_[k] = v;
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::string KeyValueConfig::require_string(const std::string& key) const {
  const auto it = values_.find(key);
  EFL_CHECK(it != values_.end(), Errc::config, "missing required key '" + key + "'");
  return it->second;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  long long v = 0;
  const auto& s = it->second;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  EFL_CHECK(r.ec == std::errc() && r.ptr == s.data() + s.size(), Errc::config,
            "key '" + key + "' expects an integer, got '" + s + "'");
  return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::uint64_t v = 0;
  const auto& s = it->second;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  EFL_CHECK(r.ec == std::errc() && r.ptr == s.data() + s.size(), Errc::config,
            "key '" + key + "' expects an unsigned integer, got '" + s + "'");
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    EFL_CHECK(pos == it->second.size(), Errc::config, "trailing characters");
    return v;
  } catch (const std::logic_error&) {
    throw Error(Errc::config, "key '" + key + "' expects a number, got '" + it->second + "'");
  }
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error(Errc::config, "key '" + key + "' expects a boolean, got '" + it->second + "'");
}

nlohmann::json KeyValueConfig::echo() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

std::string KeyValueConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

}  // namespace efl
