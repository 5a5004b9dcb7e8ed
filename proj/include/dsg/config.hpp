#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace dsg {

/// Flat `key = value` file: one pair per line, '#' starts a comment, blank
/// lines ignored. Later keys override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "<string>");
  static KeyValues load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string str(const std::string& key) const;
  std::string str(const std::string& key, const std::string& fallback) const;
  long long integer(const std::string& key) const;
  long long integer(const std::string& key, long long fallback) const;
  double number(const std::string& key) const;
  double number(const std::string& key, double fallback) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Serialized as sorted `key = value` lines.
  std::string dump() const;

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace dsg
