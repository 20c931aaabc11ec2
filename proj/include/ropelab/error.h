#pragma once

#include <stdexcept>
#include <string>

namespace ropelab {

// Violated precondition of an operation (bad argument, wrong state).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Shape mismatch between operands.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// softmax over a row with no unmasked entry.
class DegenerateRowError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Non-finite value encountered during training or evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or unknown configuration key / value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace ropelab
