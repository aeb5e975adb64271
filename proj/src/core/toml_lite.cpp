#include "toml_lite.hpp"

#include <cctype>
#include <charconv>
#include <fstream>

#include "error.hpp"

namespace mwpgen {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  }
  return k.front() != '.' && k.back() != '.';
}

// Strips a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

TomlValue parse_value(const std::string& raw, const std::string& where) {
  if (raw.empty()) fail_usage("missing value", where);
  if (raw.front() == '"') {
    if (raw.size() < 2 || raw.back() != '"') fail_usage("unterminated string", where);
    std::string out;
    for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
      if (raw[i] == '\\' && i + 2 < raw.size()) {
        const char n = raw[++i];
        out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
      } else {
        out += raw[i];
      }
    }
    return out;
  }
  if (raw == "true") return true;
  if (raw == "false") return false;
  std::string num;
  for (char c : raw) {
    if (c != '_') num += c;
  }
  long long iv = 0;
  auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), iv);
  if (ec == std::errc() && p == num.data() + num.size()) return iv;
  double dv = 0;
  auto [p2, ec2] = std::from_chars(num.data(), num.data() + num.size(), dv);
  if (ec2 == std::errc() && p2 == num.data() + num.size()) return dv;
  fail_usage("cannot parse value '" + raw + "'", where);
}

}  // namespace

TomlTable parse_toml(std::istream& in, const std::string& source_name) {
  TomlTable out;
  std::string table, line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source_name + ":" + std::to_string(lineno);
    const std::string s = trim(strip_comment(line));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) fail_usage("malformed table header", where);
      table = trim(s.substr(1, s.size() - 2));
      if (!valid_key(table)) fail_usage("invalid table name '" + table + "'", where);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail_usage("expected key = value", where);
    const std::string key = trim(s.substr(0, eq));
    if (!valid_key(key)) fail_usage("invalid key '" + key + "'", where);
    const std::string full = table.empty() ? key : table + "." + key;
    if (out.count(full)) fail_usage("duplicate key '" + full + "'", where);
    out[full] = parse_value(trim(s.substr(eq + 1)), where);
  }
  return out;
}

TomlTable load_toml(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_usage("cannot open config '" + path + "'", path);
  return parse_toml(in, path);
}

std::string toml_value_to_string(const TomlValue& v) {
  if (auto s = std::get_if<std::string>(&v)) return *s;
  if (auto i = std::get_if<long long>(&v)) return std::to_string(*i);
  if (auto b = std::get_if<bool>(&v)) return *b ? "true" : "false";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, std::get<double>(v));
  return std::string(buf, p);
}

}  // namespace mwpgen
