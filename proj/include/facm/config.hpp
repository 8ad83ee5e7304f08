#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "facm/trainer.hpp"

namespace facm::config {

/// Raised for unknown keys and unparsable values. The message names the key
/// and, for file input, the source and line.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Applies one `key = value` assignment. `where` prefixes error messages.
void apply(train::TrainConfig& config, const std::string& key, const std::string& value, const std::string& where);

/// Parses flat `key = value` text with `#` comments on top of the defaults.
train::TrainConfig parse_text(const std::string& text, const std::string& source = "<text>");

/// Reads the file (if non-empty path), then applies `key=value` overrides.
train::TrainConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Every key with its resolved value; parse_text(to_text(c)) == c.
std::string to_text(const train::TrainConfig& config);

const std::vector<std::string>& known_keys();

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace facm::config
