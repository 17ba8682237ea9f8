#pragma once

#include <stdexcept>
#include <string>

namespace retinet {

// Base of every error the library throws. The category decides the CLI exit
// code: config problems, data problems, or weight-file problems.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent tensor shapes or op configuration.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid user configuration (hyperparameters, flags, config files).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Problems reading manifests, images, logs.
class DataError : public Error {
 public:
  using Error::Error;
};

// Weight / checkpoint file problems (format, CRC, name or shape conflicts).
class WeightsError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during training (non-finite loss or gradient).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace retinet
