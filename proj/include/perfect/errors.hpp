#pragma once

#include <stdexcept>
#include <string>

namespace perfect {

// Base of every error the library raises. The C API maps each subclass onto
// a status code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed user input (bad token id, unreadable corpus row, bad config key).
class InputError : public Error {
 public:
  using Error::Error;
};

// Training diverged (NaN or infinite loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace perfect
