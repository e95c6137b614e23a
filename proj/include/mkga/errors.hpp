#pragma once

#include <stdexcept>
#include <string>

namespace mkga {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid architectural or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Invalid data handed to a loss, metric or test (labels out of range, etc).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// API misuse (backward on a non-scalar, empty batch, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or degenerate statistics.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk artifact (checkpoint, dataset, report).
class FormatError : public Error {
 public:
  enum class Kind { kIo, kBadMagic, kBadVersion, kTruncated, kNameMismatch, kShapeMismatch, kSyntax };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mkga
