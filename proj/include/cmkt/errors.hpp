#pragma once

#include <stdexcept>
#include <string>

namespace cmkt {

// Error categories. The CLI maps these onto exit codes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace cmkt
