#pragma once

#include <stdexcept>
#include <string>

namespace sepm {

// Error taxonomy shared by the library and the CLI exit-code mapping:
//   ConfigError  -> usage / configuration problems      (exit 2)
//   DataError    -> files, checkpoints, malformed input (exit 3)
//   NumericError -> NaN/Inf, failed numerical contracts (exit 4)
// ShapeError derives from ConfigError: a wrong shape is a wiring bug.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sepm
