#include "kdse/io/kv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kdse::io {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void add_field(KvRecord& rec, const std::string& field, const std::string& context) {
  const auto eq = field.find('=');
  if (eq == std::string::npos || eq == 0) throw std::runtime_error("malformed field '" + field + "' in " + context);
  rec.set(trim(field.substr(0, eq)), trim(field.substr(eq + 1)));
}

}  // namespace

void KvRecord::set(const std::string& key, std::string value) {
  if (key.find_first_of("=\t\n") != std::string::npos) throw std::invalid_argument("invalid key '" + key + "'");
  for (auto& kv : items_) {
    if (kv.first == key) {
      kv.second = std::move(value);
      return;
    }
  }
  items_.emplace_back(key, std::move(value));
}

void KvRecord::set(const std::string& key, double value) { set(key, format_number(value)); }
void KvRecord::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

bool KvRecord::has(const std::string& key) const { return find(key).has_value(); }

std::optional<std::string> KvRecord::find(const std::string& key) const {
  for (const auto& kv : items_)
    if (kv.first == key) return kv.second;
  return std::nullopt;
}

const std::string& KvRecord::at(const std::string& key) const {
  for (const auto& kv : items_)
    if (kv.first == key) return kv.second;
  throw std::runtime_error("missing key '" + key + "'");
}

double KvRecord::number(const std::string& key) const {
  const std::string& s = at(key);
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("key '" + key + "' is not a number: " + s);
  return v;
}

long long KvRecord::integer(const std::string& key) const {
  const std::string& s = at(key);
  long long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("key '" + key + "' is not an integer: " + s);
  return v;
}

std::string format_number(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw std::runtime_error("cannot format number");
  return std::string(buf, p);
}

KvRecord parse_kv_lines(const std::string& text) {
  KvRecord rec;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    add_field(rec, t, "line " + std::to_string(lineno));
  }
  return rec;
}

std::string format_kv_lines(const KvRecord& rec) {
  std::string out;
  for (const auto& [k, v] : rec.items()) out += k + "=" + v + "\n";
  return out;
}

KvRecord parse_kv_tsv(const std::string& line) {
  KvRecord rec;
  std::size_t start = 0;
  while (start <= line.size()) {
    const auto tab = line.find('\t', start);
    const std::string field = trim(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (!field.empty()) add_field(rec, field, "record");
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return rec;
}

std::string format_kv_tsv(const KvRecord& rec) {
  std::string out;
  for (const auto& [k, v] : rec.items()) {
    if (!out.empty()) out += '\t';
    out += k + "=" + v;
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace kdse::io
