// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ehicl {

// Root of the library's exception hierarchy. The CLI maps subclasses onto
// process exit codes (config → 2, data → 3, numerical → 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DegenerateConfigurationError : public DataError {
 public:
  using DataError::DataError;
};

// Serialization failures. Each failure mode gets its own type so callers can
// tell a foreign file from a damaged one.
class FormatVersionError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedBlobError : public DataError {
 public:
  using DataError::DataError;
};

class ManifestMismatchError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace ehicl
