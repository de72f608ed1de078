#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tickgp {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents or malformed shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected, log of a non-positive value, singular triangular factor.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Cholesky failure. Carries the (0-based) leading minor that was not positive.
class DecompositionError : public NumericalError {
 public:
  DecompositionError(const std::string& what, std::size_t minor)
      : NumericalError(what + " (leading minor " + std::to_string(minor) + " not positive)"),
        minor_(minor) {}

  std::size_t failing_minor() const noexcept { return minor_; }

 private:
  std::size_t minor_;
};

/// Invalid user configuration (unknown key, bad value, inconsistent model geometry).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing dataset / checkpoint files.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace tickgp
