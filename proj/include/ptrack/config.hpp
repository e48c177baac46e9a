#pragma once

#include <string>

#include "ptrack/model.hpp"

namespace ptrack {

/// Every tunable in one flat struct; defaults reproduce the reference
/// configuration. Parsed from `key = value` text (one pair per line,
/// '#' comments).
struct Config {
  // cloud sizes
  std::size_t n_template = 512;
  std::size_t n_search = 1024;
  // backbone
  std::size_t channels1 = 32;
  std::size_t channels2 = 64;
  std::size_t channels3 = 128;
  std::size_t out_channels = 32;
  std::size_t neighbors1 = 32;
  std::size_t neighbors2 = 48;
  std::size_t neighbors3 = 48;
  std::size_t heads = 2;
  bool use_norm = true;
  // correlation
  std::size_t correlation_k = 48;
  std::size_t iterations = 2;
  bool use_ego = true;
  bool use_cosine = false;
  // detection head and grid
  std::size_t head_channels = 32;
  double bev_extent_x = 11.2;
  double bev_extent_y = 7.2;
  double bev_cell = 0.3;
  double search_margin = 2.0;
  // loss weights
  double w_heatmap = 1.0;
  double w_offset = 1.0;
  double w_z = 1.0;
  double w_yaw = 1.0;
  // training
  double lr = 1e-3;
  std::size_t steps = 1000;
  std::string optimizer = "adam";
  double jitter_pos = 0.3;
  double jitter_yaw_deg = 5.0;
  std::string category = "Car";

  bool operator==(const Config&) const = default;
};

/// Throws DataError on unknown keys (all of them listed), malformed lines,
/// duplicate keys, or unparsable values.
Config parse_config(const std::string& text);

/// Canonical text form; serialize_config(parse_config(s)) is a fixed point.
std::string serialize_config(const Config& config);

Config load_config_file(const std::string& path);

ModelConfig model_config(const Config& config);

}  // namespace ptrack
