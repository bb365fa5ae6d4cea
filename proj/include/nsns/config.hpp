#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace nsns {

/// Flat key-value experiment config with [section] headers, '#' comments and
/// `key = value` lines. Every key must be consumed by the command that runs the
/// config; leftovers are rejected so typos cannot silently change an experiment.
class RunConfig {
 public:
  static RunConfig parse_string(const std::string& text, const std::string& origin = "<string>");
  static RunConfig parse_file(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key);
  std::string get_or(const std::string& section, const std::string& key, const std::string& def);

  long long get_int(const std::string& section, const std::string& key);
  long long get_int_or(const std::string& section, const std::string& key, long long def);
  uint64_t get_u64_or(const std::string& section, const std::string& key, uint64_t def);
  double get_double(const std::string& section, const std::string& key);
  double get_double_or(const std::string& section, const std::string& key, double def);
  bool get_bool_or(const std::string& section, const std::string& key, bool def);
  std::vector<std::string> get_list(const std::string& section, const std::string& key);
  std::vector<double> get_double_list(const std::string& section, const std::string& key);
  std::vector<int> get_int_list(const std::string& section, const std::string& key);

  std::vector<std::string> section_names() const;

  /// Throws, naming every key no command consumed.
  void reject_unknown() const;

  /// Canonical dump (sections and keys sorted) for the resolved-config copy.
  std::string resolved_text() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
  mutable std::set<std::string> consumed_;
  std::string origin_;

  const std::string* find(const std::string& section, const std::string& key) const;
};

}  // namespace nsns
