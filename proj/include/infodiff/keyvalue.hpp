#pragma once

// Line-oriented `key = value` text with `#` comments.

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace infodiff::kv {

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

class KeyValues {
 public:
  // Throws ConfigError naming the line on malformed or duplicate entries.
  static KeyValues parse(std::string_view text);

  bool has(const std::string& key) const { return index_.count(key) != 0; }
  const std::vector<std::pair<std::string, std::string>>& entries() const noexcept { return entries_; }

  // Replaces an existing value in place or appends a new key.
  void set(const std::string& key, std::string value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }
  void set(const std::string& key, int value) { set(key, std::to_string(value)); }
  void set(const std::string& key, std::int64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }
  void set(const std::string& key, double value) { set(key, format_double(value)); }
  void set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

  // Typed reads throw ConfigError naming the key when the value is malformed.
  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError for the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  // "key = value" lines, or "key=value" when compact.
  std::string format(bool compact = false) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace infodiff::kv
