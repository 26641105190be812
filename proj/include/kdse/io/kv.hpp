#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace kdse::io {

/// Ordered key/value record. Keys are unique; set() replaces in place.
class KvRecord {
 public:
  void set(const std::string& key, std::string value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

  bool has(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;
  /// Throws std::runtime_error naming the missing key.
  const std::string& at(const std::string& key) const;
  double number(const std::string& key) const;
  long long integer(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }
  bool empty() const { return items_.empty(); }

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

/// Exact decimal rendering of a double that parses back to the same value.
std::string format_number(double v);

/// One `key=value` per line; blank lines and `#` comments are skipped.
KvRecord parse_kv_lines(const std::string& text);
std::string format_kv_lines(const KvRecord& rec);

/// Tab-separated `key=value` fields on one line.
KvRecord parse_kv_tsv(const std::string& line);
std::string format_kv_tsv(const KvRecord& rec);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace kdse::io
