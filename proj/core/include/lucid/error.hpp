#pragma once

#include <stdexcept>
#include <string>

namespace lucid {

// All library failures derive from Error so callers can catch one type; the
// subclasses let the CLI and the service map failures to exit codes / HTTP
// statuses without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

// Raised when an operation is valid in general but not in the current state
// (wrong session phase, channel already frozen).
class Conflict : public Error {
 public:
  using Error::Error;
};

class CorruptCheckpoint : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace lucid
