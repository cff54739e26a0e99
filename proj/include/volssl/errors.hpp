#pragma once

#include <stdexcept>
#include <string>

namespace volssl {

/// Base of all library errors. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, flags, or schema (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, inconsistent, or unusable input data (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate numerics (exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace volssl
