#pragma once

#include <stdexcept>
#include <string>

namespace opcb {

/// Base class for every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SizeError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct InvalidGroupError : Error {
  using Error::Error;
};

struct LookupError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

/// A record or group has zero logging probability where the estimator needs it positive.
struct SupportViolation : Error {
  using Error::Error;
};

struct FitError : Error {
  using Error::Error;
};

/// A documented precondition of a closed-form expression does not hold.
struct PreconditionError : Error {
  using Error::Error;
};

struct SelectionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace opcb
