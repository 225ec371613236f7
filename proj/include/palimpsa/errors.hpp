#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace palimpsa {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (negative decay,
/// non positive-definite covariance, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A rule was fed input it is not typed for, e.g. a non-uniform beta vector
/// into a scalar-beta rule.
class RuleContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or otherwise invalid intermediate value. Carries the sequence
/// coordinates where it was detected when they are known.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, std::optional<std::size_t> step = std::nullopt,
                        std::optional<std::size_t> chunk = std::nullopt)
      : Error(format(what, step, chunk)), base_(what), step_(step), chunk_(chunk) {}

  std::optional<std::size_t> step() const noexcept { return step_; }
  std::optional<std::size_t> chunk() const noexcept { return chunk_; }

  NumericError at_step(std::size_t step) const { return NumericError(base_, step, chunk_); }
  NumericError at_chunk(std::size_t chunk, std::size_t offset) const {
    return NumericError(base_, offset, chunk);
  }

 private:
  static std::string format(const std::string& what, std::optional<std::size_t> step,
                            std::optional<std::size_t> chunk) {
    std::string out = what;
    if (chunk) out += " (chunk " + std::to_string(*chunk) + ")";
    if (step) out += (chunk ? " (offset " : " (step ") + std::to_string(*step) + ")";
    return out;
  }

  std::string base_;
  std::optional<std::size_t> step_;
  std::optional<std::size_t> chunk_;
};

}  // namespace palimpsa
