#pragma once

#include <stdexcept>
#include <string>

namespace milforge {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError / DimensionError / FormatError -> 1 (validation)
//   NumericalError                             -> 2 (numerical failure)
struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a metric is undefined for the given inputs (e.g. single-class AUC).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kVersion = "0.1.0";

}  // namespace milforge
