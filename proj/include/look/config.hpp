#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "look/dataset.hpp"
#include "look/evalsuite.hpp"
#include "look/model.hpp"
#include "look/trainer.hpp"

namespace look {

/// Everything one experiment run needs. Parsed from flat `key = value` text;
/// `#` starts a comment. Omitted keys keep their defaults.
struct RunConfig {
  std::uint64_t seed = 1;       // pre-training, probe and clustering RNG
  std::uint64_t data_seed = 1;  // synthetic sampling and split draws
  std::string data_path;
  std::string out_dir = "run";

  SyntheticSpec data;
  TrainConfig train;
  ProbeConfig probe;
  MemoryTransferConfig memory;

  /// Rows kept per sub-class for the downstream task; 0 keeps all.
  std::size_t downstream_per_subclass = 2000;
  FeatureSource feature_source = FeatureSource::kEmbedding;

  /// Copies the shared seed into the component configs and ties the
  /// schedule length to the epoch count.
  void resolve();
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Throws ConfigError naming the line for unknown or repeated keys, malformed
/// values and out-of-range values. The result is resolved and validated.
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

/// Every key in canonical order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);
void save_config_file(const RunConfig& cfg, const std::string& path);

std::vector<std::string> config_keys();

/// Applies one `key = value` assignment (used for command-line overrides).
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace look
