#pragma once

#include <stdexcept>
#include <string>

namespace cmsnet {

/// Base of every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or axes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A spatial extent of zero reached an operation that needs data.
class EmptyTensorError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

/// Invalid configuration value (strides, arrangement names, severities...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Data that is well-formed but violates a contract (labels out of range...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// A metric was requested on a matrix that carries no counted pixels.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmsnet
