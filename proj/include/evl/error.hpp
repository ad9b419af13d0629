#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evl {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform for the requested operation.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Input data violates a precondition (labels out of range, empty split...).
class ValidationError : public Error {
public:
  using Error::Error;
};

/// Model or run configuration is inconsistent.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class UsageError : public Error {
public:
  using Error::Error;
};

/// A non-finite value appeared where finite values are required.
class NumericError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

/// Malformed binary input; carries the byte offset where decoding failed.
class ParseError : public Error {
public:
  ParseError(const std::string &what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

/// Input ended before the declared payload.
class LengthError : public ParseError {
public:
  using ParseError::ParseError;
};

/// Checkpoint could not be restored.
class LoadError : public Error {
public:
  using Error::Error;
};

} // namespace evl
