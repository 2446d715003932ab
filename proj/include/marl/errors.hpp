#pragma once

#include <stdexcept>
#include <string>

namespace marl {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation (log of a
/// non-positive value, non-positive variance, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A forward computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An operation was requested before its prerequisites exist.
class SequencingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace marl
