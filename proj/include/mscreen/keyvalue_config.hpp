#pragma once

// Flat "key = value" configuration files. '#' starts a comment; blank lines
// are ignored; later assignments override earlier ones.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace mscreen {

class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text, const std::string& origin = "<text>");
  /// Throws std::runtime_error naming the path if the file cannot be read.
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.contains(key); }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::optional<std::string> get(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_real(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Sorted "key = value" lines.
  std::string to_text() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace mscreen
