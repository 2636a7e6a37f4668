#pragma once

#include <stdexcept>
#include <string>

namespace cdvito {

// Base of every error raised by the library. The CLI maps subclasses to exit
// codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed bytes in a feature pack or checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Well-formed input that violates a data invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class InsufficientBackgroundError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdvito
