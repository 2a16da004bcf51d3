#pragma once

#include <stdexcept>
#include <string>

namespace phenocnn {

// Failure categories surfaced by the command-line tool as distinct exit codes.

/// Invalid or inconsistent configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or unusable input data (exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint could not be read or does not match its inputs (exit code 4).
class ModelLoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace phenocnn
