#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bfr {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Violated call contract (non-scalar loss, bad axis, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration detected at construction or load time.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Well-formed data that fails a semantic check (e.g. non-square image).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A training loss became NaN or infinite.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& component, double value)
      : Error("non-finite loss component '" + component + "' = " + std::to_string(value)),
        component_(component) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ShapeConflictError : public CheckpointError {
 public:
  ShapeConflictError(const std::string& tensor, const std::string& detail)
      : CheckpointError("shape conflict for tensor '" + tensor + "': " + detail), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace bfr
