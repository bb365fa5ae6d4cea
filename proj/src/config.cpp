#include "nsns/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nsns {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::parse_string(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                    ": malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty section");
      cfg.sections_[section];  // sections may be empty
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
    if (section.empty())
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": key '" + key +
                                  "' outside any [section]");
    if (cfg.sections_[section].count(key))
      throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                                  section + "." + key + "'");
    cfg.sections_[section][key] = value;
  }
  return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path);
}

const std::string* RunConfig::find(const std::string& section, const std::string& key) const {
  auto s = sections_.find(section);
  if (s == sections_.end()) return nullptr;
  auto k = s->second.find(key);
  if (k == s->second.end()) return nullptr;
  return &k->second;
}

bool RunConfig::has(const std::string& section, const std::string& key) const {
  return find(section, key) != nullptr;
}

std::string RunConfig::get(const std::string& section, const std::string& key) {
  const std::string* v = find(section, key);
  if (!v)
    throw std::invalid_argument("config " + origin_ + ": missing required key '" + section + "." +
                                key + "'");
  consumed_.insert(section + "." + key);
  return *v;
}

std::string RunConfig::get_or(const std::string& section, const std::string& key,
                              const std::string& def) {
  if (!has(section, key)) return def;
  return get(section, key);
}

long long RunConfig::get_int(const std::string& section, const std::string& key) {
  std::string v = get(section, key);
  char* end = nullptr;
  long long out = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: key '" + section + "." + key + "' = '" + v +
                                "' is not an integer");
  return out;
}

long long RunConfig::get_int_or(const std::string& section, const std::string& key,
                                long long def) {
  if (!has(section, key)) return def;
  return get_int(section, key);
}

uint64_t RunConfig::get_u64_or(const std::string& section, const std::string& key, uint64_t def) {
  if (!has(section, key)) return def;
  std::string v = get(section, key);
  char* end = nullptr;
  unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: key '" + section + "." + key + "' = '" + v +
                                "' is not an unsigned integer");
  return out;
}

double RunConfig::get_double(const std::string& section, const std::string& key) {
  std::string v = get(section, key);
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: key '" + section + "." + key + "' = '" + v +
                                "' is not a number");
  return out;
}

double RunConfig::get_double_or(const std::string& section, const std::string& key, double def) {
  if (!has(section, key)) return def;
  return get_double(section, key);
}

bool RunConfig::get_bool_or(const std::string& section, const std::string& key, bool def) {
  if (!has(section, key)) return def;
  std::string v = get(section, key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: key '" + section + "." + key + "' = '" + v +
                              "' is not a boolean");
}

std::vector<std::string> RunConfig::get_list(const std::string& section, const std::string& key) {
  std::string v = get(section, key);
  std::vector<std::string> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> RunConfig::get_double_list(const std::string& section,
                                               const std::string& key) {
  std::vector<double> out;
  for (const std::string& s : get_list(section, key)) {
    char* end = nullptr;
    double d = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
      throw std::invalid_argument("config: '" + section + "." + key + "' entry '" + s +
                                  "' is not a number");
    out.push_back(d);
  }
  return out;
}

std::vector<int> RunConfig::get_int_list(const std::string& section, const std::string& key) {
  std::vector<int> out;
  for (double d : get_double_list(section, key)) out.push_back(static_cast<int>(d));
  return out;
}

std::vector<std::string> RunConfig::section_names() const {
  std::vector<std::string> out;
  for (const auto& [name, keys] : sections_) out.push_back(name);
  return out;
}

void RunConfig::reject_unknown() const {
  std::vector<std::string> unknown;
  for (const auto& [section, keys] : sections_)
    for (const auto& [key, value] : keys)
      if (!consumed_.count(section + "." + key)) unknown.push_back(section + "." + key);
  if (!unknown.empty()) {
    std::string msg = "config " + origin_ + ": unknown key(s):";
    for (const std::string& k : unknown) msg += " " + k;
    throw std::invalid_argument(msg);
  }
}

std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& [section, keys] : sections_) {
    out += "[" + section + "]\n";
    for (const auto& [key, value] : keys) out += key + " = " + value + "\n";
    out += "\n";
  }
  return out;
}

}  // namespace nsns
