#include "infodiff/keyvalue.hpp"

#include <charconv>
#include <cmath>

#include "infodiff/errors.hpp"

namespace infodiff::kv {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* kind) {
  throw ConfigError("config: key '" + key + "' expects " + kind + ", got '" + value + "'");
}

}  // namespace

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

KeyValues KeyValues::parse(std::string_view text) {
  KeyValues out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (out.has(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out.set(key, std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

void KeyValues::set(const std::string& key, std::string value) {
  if (auto it = index_.find(key); it != index_.end()) {
    entries_[it->second].second = std::move(value);
    return;
  }
  index_[key] = entries_.size();
  entries_.emplace_back(key, std::move(value));
}

std::string KeyValues::get(const std::string& key, const std::string& fallback) const {
  auto it = index_.find(key);
  return it == index_.end() ? fallback : entries_[it->second].second;
}

int KeyValues::get_int(const std::string& key, int fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key, "");
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad_value(key, v, "true/false or on/off");
}

void KeyValues::require_known(const std::set<std::string>& known) const {
  for (const auto& [key, value] : entries_) {
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
}

std::string KeyValues::format(bool compact) const {
  std::string out;
  for (const auto& [key, value] : entries_) out += key + (compact ? "=" : " = ") + value + "\n";
  return out;
}

}  // namespace infodiff::kv
