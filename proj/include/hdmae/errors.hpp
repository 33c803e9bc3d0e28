#pragma once

#include <stdexcept>
#include <string>

namespace hdmae {

// Root of every error thrown by the library. Subclasses are the "typed
// errors" callers are expected to catch and map to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// A precondition of an API call was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid user-facing configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file (PGM, region, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint file is truncated, inconsistent, or from another version.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace hdmae
