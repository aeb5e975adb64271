#pragma once

#include <istream>
#include <map>
#include <string>
#include <variant>

namespace mwpgen {

// The subset of TOML used by config files: [table] headers, bare or dotted
// keys, and string / integer / float / boolean values with # comments.
// Keys are flattened as "table.key".
using TomlValue = std::variant<std::string, long long, double, bool>;
using TomlTable = std::map<std::string, TomlValue>;

TomlTable parse_toml(std::istream& in, const std::string& source_name);
TomlTable load_toml(const std::string& path);

std::string toml_value_to_string(const TomlValue& v);

}  // namespace mwpgen
