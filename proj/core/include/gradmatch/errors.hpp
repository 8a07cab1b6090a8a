#pragma once

#include <stdexcept>
#include <string>

namespace gradmatch {

// Every error thrown by the library derives from Error. The CLI maps the
// categories below onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension contract violated by an operation's inputs.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN/Inf from finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Autodiff graph misuse (unreachable input, non-scalar output, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed input file (bad magic, truncated payload, checksum).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during condensation or training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradmatch
