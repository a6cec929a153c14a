#pragma once

#include <stdexcept>
#include <string>

namespace clora {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/axis mismatch between tensors.
struct DimensionError : Error {
  using Error::Error;
};

// API misuse: backward on a non-scalar, double merge, missing grad, ...
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

// Invalid experiment configuration or schedule spec.
struct ConfigError : Error {
  using Error::Error;
};

// Out-of-range labels, mismatched image/label pairs, bad dataset contents.
struct DataError : Error {
  using Error::Error;
};

// Malformed file contents (PPM/PGM headers, checkpoint container).
struct ParseError : Error {
  using Error::Error;
};

// Filesystem failures (unreadable/unwritable paths).
struct IoError : Error {
  using Error::Error;
};

}  // namespace clora
