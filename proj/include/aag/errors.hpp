#pragma once

#include <stdexcept>
#include <string>

namespace aag {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Scalar arguments out of their valid range (stride, axis, label, ...).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Architecture or run configuration that cannot be built.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Missing/empty datasets and undecodable images.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Operation not available for the given model (e.g. attention taps on a
// backbone without attention modules).
class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace aag
