#pragma once

#include <stdexcept>
#include <string>

namespace steerlab {

// Base for every error raised on bad input, bad files or contract violations.
// Anything else escaping the library is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// File content does not match the expected binary or text format.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Arguments or data violate a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace steerlab
