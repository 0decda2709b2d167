#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mvcca::config {

/// Flat key=value run configuration. Sources stack: file text first, then
/// explicit set() overrides (the CLI's --set flags), later writes winning.
/// Keys are dotted names; the format has no nesting or quoting.
class Config {
 public:
  Config() = default;

  /// `#` starts a comment, blank lines are skipped, duplicate keys within
  /// one text are rejected.
  static Config parse_text(const std::string& text);
  static Config parse_file(const std::string& path);

  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;

  // The one-argument forms throw when the key is absent.
  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_num(const std::string& key) const;
  double get_num(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_flag(const std::string& key, bool fallback) const;
  std::vector<double> get_num_list(const std::string& key) const;
  std::vector<double> get_num_list(const std::string& key, const std::vector<double>& fallback) const;

  /// Every present key must appear in `known`, except that a "grid."
  /// prefix marks a sweep over the suffix key, which itself must be known.
  void reject_unknown(const std::vector<std::string>& known) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

/// Separator split with whitespace trimming; empty text gives no pieces.
std::vector<std::string> split_list(const std::string& text, char sep);

// Strict scalar parsers: the full trimmed token must be consumed.
double parse_num(const std::string& text, const std::string& what);
std::int64_t parse_int(const std::string& text, const std::string& what);
std::uint64_t parse_u64(const std::string& text, const std::string& what);
bool parse_flag(const std::string& text, const std::string& what);

}  // namespace mvcca::config
