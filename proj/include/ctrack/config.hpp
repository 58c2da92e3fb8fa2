#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "ctrack/training.hpp"

namespace ctrack {

/// Missing file, malformed line, unknown key or violated constraint.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default, in file order.
const std::vector<ConfigKey>& config_keys();

/// key=value lines; '#' starts a comment; blank lines are ignored.
RunConfig parse_config_string(const std::string& text);
RunConfig parse_config(const std::string& path);

/// Inverse of parse_config_string; doubles are written with round-trip precision.
std::string serialize_config(const RunConfig& cfg);

}  // namespace ctrack
