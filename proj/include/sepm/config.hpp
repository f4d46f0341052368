#pragma once

#include <string>
#include <vector>

#include "sepm/separator.hpp"
#include "sepm/tensor.hpp"
#include "sepm/trainer.hpp"

namespace sepm {

struct BenchOptions {
  double seconds = 4.0;
  int repeats = 10;
  int warmup = 1;
  bool profile = true;
};

// Everything the CLI reads from one config file. Sections map onto the
// structs: [model], [train], [data], [bench].
struct AppConfig {
  SeparatorConfig model;
  TrainConfig train;
  DataPipeConfig data;
  BenchOptions bench;
  Precision precision = Precision::F32;
};

struct ConfigKeyInfo {
  std::string section;
  std::string key;
  std::string default_value;
  std::string description;
};

// One entry per recognized key, with defaults and descriptions (drives both
// parsing and --help). Unknown keys are rejected by the parser.
const std::vector<ConfigKeyInfo>& config_key_table();

AppConfig parse_config_text(const std::string& text, const std::string& origin);
AppConfig parse_config_file(const std::string& path);

// Rendered key table for --help.
std::string config_help_text();

// A config file with every key at its default.
std::string default_config_text();

// Built-in model presets: "s", "m", "tiny".
SeparatorConfig preset_model(const std::string& name);

}  // namespace sepm
