#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dood {

/// Ordered UTF-8 "key=value" text file. Keys keep insertion order on write.
class KeyValueFile {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, const std::vector<float>& values);

  bool has(const std::string& key) const;
  /// Throws DataError naming the key when it is absent.
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::vector<float> get_floats(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_string() const;
  static KeyValueFile parse(const std::string& text);
  void write(const std::filesystem::path& path) const;
  static KeyValueFile read(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Shortest decimal text that parses back to exactly `v`.
std::string format_exact(double v);
std::string format_exact(float v);
double parse_double(const std::string& s);

}  // namespace dood
