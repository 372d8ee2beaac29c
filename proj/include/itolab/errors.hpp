#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace itolab {

/// Bad shapes, out-of-range parameters, mismatched grids.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnsupportedDimension : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

/// Difference quotients that increase as the step shrinks: the oracle is not convex.
class ConvexityViolation : public std::runtime_error {
 public:
  ConvexityViolation(const std::string& what, double excess)
      : std::runtime_error(what), excess_(excess) {}
  double excess() const { return excess_; }

 private:
  double excess_;
};

class SmoothingFailure : public std::runtime_error {
 public:
  SmoothingFailure(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// A directional subgradient sequence that does not settle.
class LimitFailure : public std::runtime_error {
 public:
  LimitFailure(const std::string& what, double oscillation)
      : std::runtime_error(what), oscillation_(oscillation) {}
  double oscillation() const { return oscillation_; }

 private:
  double oscillation_;
};

class InsufficientData : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Aggregates every violation found while validating a config.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& items) {
    std::string out = "invalid config:";
    for (const auto& item : items) {
      out += "\n  - ";
      out += item;
    }
    return out;
  }
  std::vector<std::string> problems_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace itolab
