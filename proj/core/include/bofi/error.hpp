#pragma once

#include <stdexcept>
#include <string>

namespace bofi {

// Error categories map one-to-one onto the CLI exit codes (2, 3, 4).

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace bofi
