#pragma once

#include <stdexcept>
#include <string>

namespace dfbf {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in a value or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A file or byte stream does not follow its declared layout.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid user configuration (bad ratios, unknown keys, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Graph structure violates an invariant (residual join mismatch, tap misalignment, ...).
class StructuralError : public Error {
 public:
  using Error::Error;
};

}  // namespace dfbf
