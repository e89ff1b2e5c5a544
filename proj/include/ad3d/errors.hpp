#pragma once

#include <stdexcept>
#include <string>

namespace ad3d {

// Invalid or inconsistent run configuration. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Missing, malformed, or incompatible input data. CLI exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Numeric breakdown during compute (non-finite loss, degenerate pools). CLI exit code 4.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::invalid_argument {
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace ad3d
