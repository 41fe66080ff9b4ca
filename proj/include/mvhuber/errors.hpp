#pragma once

#include <stdexcept>
#include <string>

namespace mvhuber {

// Iterative routine failed to reach its tolerance (eigensolver sweeps,
// singular normal equations). Domain and range problems use the standard
// std::domain_error / std::range_error types.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Caller violated a documented precondition that is not a plain domain check
// (e.g. segment endpoints outside the convexity region).
class PreconditionError : public std::invalid_argument {
public:
    explicit PreconditionError(const std::string& what) : std::invalid_argument(what) {}
};

}  // namespace mvhuber
