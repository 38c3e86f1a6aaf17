#include "lhc/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <sstream>

#include "lhc/errors.hpp"

namespace lhc {
namespace {

std::string trim(const std::string& s) {
  const std::size_t beg = s.find_first_not_of(" \t\r");
  if (beg == std::string::npos) return "";
  const std::size_t end = s.find_last_not_of(" \t\r");
  return s.substr(beg, end - beg + 1);
}

[[noreturn]] void bad_value(const std::string& key, const char* expected,
                            const std::string& value) {
  throw ConfigError("config key '" + key + "': expected " + expected +
                    ", got '" + value + "'");
}

}  // namespace

KvFile KvFile::parse(std::istream& in) {
  KvFile kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ParseError("line " + std::to_string(lineno) +
                       ": expected 'key = value', got '" + stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    if (key.empty())
      throw ParseError("line " + std::to_string(lineno) + ": empty key");
    kv.entries_.emplace_back(key, trim(stripped.substr(eq + 1)));
  }
  return kv;
}

KvFile KvFile::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

std::string KvFile::serialize() const {
  std::string out;
  for (const auto& [key, value] : entries_) {
    out += key;
    out += value.empty() ? " =" : " = " + value;
    out += '\n';
  }
  return out;
}

bool KvFile::has(const std::string& key) const {
  for (const auto& entry : entries_)
    if (entry.first == key) return true;
  return false;
}

std::size_t KvFile::count(const std::string& key) const {
  std::size_t n = 0;
  for (const auto& entry : entries_)
    if (entry.first == key) ++n;
  return n;
}

const std::string& KvFile::get(const std::string& key) const {
  for (const auto& entry : entries_)
    if (entry.first == key) return entry.second;
  throw ConfigError("config key '" + key + "' not found");
}

std::string KvFile::get_or(const std::string& key,
                           std::string fallback) const {
  for (const auto& entry : entries_)
    if (entry.first == key) return entry.second;
  return fallback;
}

std::vector<std::string> KvFile::all(const std::string& key) const {
  std::vector<std::string> values;
  for (const auto& entry : entries_)
    if (entry.first == key) values.push_back(entry.second);
  return values;
}

long long KvFile::get_int(const std::string& key) const {
  const std::string& value = get(key);
  errno = 0;
  char* end = nullptr;
  const long long parsed = std::strtoll(value.c_str(), &end, 10);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE)
    bad_value(key, "an integer", value);
  return parsed;
}

double KvFile::get_double(const std::string& key) const {
  const std::string& value = get(key);
  errno = 0;
  char* end = nullptr;
  const double parsed = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE)
    bad_value(key, "a number", value);
  return parsed;
}

bool KvFile::get_bool(const std::string& key) const {
  const std::string& value = get(key);
  if (value == "1" || value == "true" || value == "on") return true;
  if (value == "0" || value == "false" || value == "off") return false;
  bad_value(key, "a boolean (1/0/true/false/on/off)", value);
}

void KvFile::set(const std::string& key, std::string value) {
  for (auto& entry : entries_) {
    if (entry.first == key) {
      entry.second = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

void KvFile::add(const std::string& key, std::string value) {
  entries_.emplace_back(key, std::move(value));
}

}  // namespace lhc
