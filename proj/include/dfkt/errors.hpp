#pragma once

#include <stdexcept>
#include <string>

namespace dfkt {

// Invalid argument or configuration value.
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of a function.
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Tensor / vector extents do not agree.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN or Inf produced during a computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or unrecognized checkpoint file.
struct ChecksumError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace dfkt
