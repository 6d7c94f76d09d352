#pragma once

#include <stdexcept>
#include <string>

namespace hyb {

// Dimension / shape contract violations.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced or consumed by an op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration values (config files, hyperparameters, layer specs).
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& msg, int line = 0)
      : std::invalid_argument(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

// Malformed files (checkpoints, images, label tables).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hyb
