#pragma once

#include <stdexcept>
#include <string>

namespace look {

// Every failure raised by the library derives from Error. The CLI maps the
// categories onto exit codes (ConfigError/UsageError -> 1, the rest -> 2).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class SizeError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  using DataError::DataError;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace look
