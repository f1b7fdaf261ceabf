#pragma once

#include <stdexcept>
#include <string>

namespace qr {

// Base of every error the engine raises. The CLI maps each subclass to an
// exit code (2 config, 3 data, 4 numeric).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace qr
