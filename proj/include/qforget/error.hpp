#pragma once

#include <stdexcept>
#include <string>

namespace qforget {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a forward value, a gradient, or a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is outside its valid domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A file could not be read, written, or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace qforget
