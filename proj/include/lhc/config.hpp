#pragma once

#include <istream>
#include <string>
#include <utility>
#include <vector>

namespace lhc {

// Ordered plain-text "key = value" store used for specs, run manifests and
// serialized plans. Lines starting with '#' (and blank lines) are ignored;
// keys may repeat (order preserved); values keep internal whitespace.
class KvFile {
 public:
  static KvFile parse(std::istream& in);
  static KvFile parse_string(const std::string& text);

  std::string serialize() const;

  bool has(const std::string& key) const;
  std::size_t count(const std::string& key) const;

  // First value of `key`; throws ConfigError when absent.
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, std::string fallback) const;
  std::vector<std::string> all(const std::string& key) const;

  // Typed reads of the first value. Malformed values throw ConfigError
  // naming the key. Booleans accept 1/0/true/false/on/off.
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  void set(const std::string& key, std::string value);  // replace first/add
  void add(const std::string& key, std::string value);  // always append

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace lhc
