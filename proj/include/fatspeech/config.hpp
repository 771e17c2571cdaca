#pragma once

#include <map>
#include <string>
#include <vector>

namespace fatspeech {

// Flat `section.key=value` settings. Blank lines and lines starting with '#'
// are ignored; later assignments override earlier ones.
class Config {
 public:
  static Config parse(const std::string& text);
  static Config load(const std::string& path);

  void set(const std::string& key, const std::string& value) { entries_[key] = value; }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string get(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Applies "key=value" strings, e.g. from repeated --set flags.
  void apply_overrides(const std::vector<std::string>& assignments);
  void merge(const Config& other);

  // Canonical form: sorted key=value lines.
  std::string to_text() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace fatspeech
