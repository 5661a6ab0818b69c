#pragma once

#include <stdexcept>
#include <string>

namespace semamil {

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or sizes that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or violated preconditions.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// File-system failures and malformed files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace semamil
