#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base of every error raised by the library. `category()` is the stable,
/// machine-parsable tag the CLI prints and maps to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept = 0;
};

/// Bad configuration, shape mismatch, or a violated precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
};

/// NaN/Inf encountered in a loss or activation.
class NumericalError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "numerical"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "io"; }
};

/// A run-time integrity check failed (e.g. a frozen expert changed).
class InvariantViolation : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "invariant"; }
};

}  // namespace moelab
