#pragma once

#include <stdexcept>
#include <string>

namespace mergeforge {

// Raised when a caller breaks an API precondition (shape mismatch, bad
// arguments, incompatible checkpoints). Maps to CLI exit code 2.
class ContractViolation : public std::invalid_argument {
public:
    explicit ContractViolation(const std::string& what) : std::invalid_argument(what) {}
};

// Raised when a computation degenerates numerically (non-finite values,
// divergent optimization). Maps to CLI exit code 1.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mergeforge
