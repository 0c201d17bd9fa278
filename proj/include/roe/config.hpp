#pragma once

#include <filesystem>
#include <string>

#include "roe/inference.hpp"
#include "roe/training.hpp"

namespace roe {

/// Everything one CLI invocation needs. The model seed always follows
/// `train.seed`.
struct RunConfig {
  TrainConfig train;
  BenchOptions bench;
  std::size_t max_new_tokens = 8;
  std::filesystem::path out = "runs/default";

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Hash of the training config; every output file carries it.
  std::string hash() const { return train.hash(); }
};

/// Parses an INI document with sections [model], [data], [train], [eval],
/// [bench], [run]. Keys not given keep their defaults; unknown sections or
/// keys and unparsable values raise ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// `cfg` as an INI document, one comment line per key. parse_config reads it
/// back to an equal config.
std::string config_text(const RunConfig& cfg);
inline std::string default_config_text() { return config_text(RunConfig{}); }

/// Sets one `section.key` from its textual value, as the parser would.
void set_config_value(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

}  // namespace roe
