#pragma once

#include <stdexcept>
#include <string>

namespace medvit {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments, detected before any compute.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in inputs, losses or activations.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace medvit
