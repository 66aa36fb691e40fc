// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace diversenet {

/// Invalid value passed to an operation (empty list, out-of-range label, ...).
class ArgError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor shapes that do not line up.
class ShapeError : public ArgError {
public:
  using ArgError::ArgError;
};

/// Invalid configuration (bad field value, cross-field violation, unknown key).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A reduction that has nothing to reduce (all pixels ignored, empty matrix).
class DegenerateError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// File-level I/O failure.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Manifest content violates its schema (bad version, missing field).
class SchemaError : public IoError {
public:
  using IoError::IoError;
};

/// Manifest references a file that does not exist.
class MissingFileError : public IoError {
public:
  using IoError::IoError;
};

/// Unreadable, truncated, or version-mismatched checkpoint.
class CheckpointError : public IoError {
public:
  using IoError::IoError;
};

}  // namespace diversenet
