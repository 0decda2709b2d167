#include "mvcca/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mvcca::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has no '='");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has an empty key");
    if (!cfg.kv_.emplace(key, value).second)
      throw std::invalid_argument("config: duplicate key '" + key + "'");
  }
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

void Config::set(const std::string& key, const std::string& value) {
  const std::string k = trim(key);
  if (k.empty()) throw std::invalid_argument("config: empty key in override");
  kv_[k] = trim(value);
}

bool Config::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string Config::get_str(const std::string& key) const {
  const auto it = kv_.find(key);
  if (it == kv_.end()) throw std::invalid_argument("config: missing key '" + key + "'");
  return it->second;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  const auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

double Config::get_num(const std::string& key) const { return parse_num(get_str(key), key); }

double Config::get_num(const std::string& key, double fallback) const {
  return has(key) ? get_num(key) : fallback;
}

std::int64_t Config::get_int(const std::string& key) const { return parse_int(get_str(key), key); }

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? parse_u64(get_str(key), key) : fallback;
}

bool Config::get_flag(const std::string& key, bool fallback) const {
  return has(key) ? parse_flag(get_str(key), key) : fallback;
}

std::vector<double> Config::get_num_list(const std::string& key) const {
  const auto parts = split_list(get_str(key), ',');
  std::vector<double> out;
  out.reserve(parts.size());
  for (const auto& p : parts) out.push_back(parse_num(p, key));
  return out;
}

std::vector<double> Config::get_num_list(const std::string& key,
                                         const std::vector<double>& fallback) const {
  return has(key) ? get_num_list(key) : fallback;
}

void Config::reject_unknown(const std::vector<std::string>& known) const {
  for (const auto& kv : kv_) {
    std::string probe = kv.first;
    if (probe.rfind("grid.", 0) == 0) probe = probe.substr(5);
    if (std::find(known.begin(), known.end(), probe) == known.end())
      throw std::invalid_argument("config: unknown key '" + kv.first + "'");
  }
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  const std::string trimmed = trim(text);
  if (trimmed.empty()) return out;
  std::size_t begin = 0;
  while (true) {
    const auto pos = trimmed.find(sep, begin);
    out.push_back(trim(trimmed.substr(begin, pos - begin)));
    if (pos == std::string::npos) break;
    begin = pos + 1;
  }
  return out;
}

double parse_num(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config: bad number for '" + what + "': '" + text + "'");
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const std::int64_t v = std::stoll(t, &used);
    if (used == t.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("config: bad integer for '" + what + "': '" + text + "'");
}

std::uint64_t parse_u64(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (!t.empty() && t[0] != '-') {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(t, &used);
      if (used == t.size()) return v;
    } catch (const std::exception&) {
    }
  }
  throw std::invalid_argument("config: bad unsigned integer for '" + what + "': '" + text + "'");
}

bool parse_flag(const std::string& text, const std::string& what) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw std::invalid_argument("config: bad flag for '" + what + "': '" + text + "'");
}

}  // namespace mvcca::config
