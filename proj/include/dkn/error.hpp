#pragma once

#include <stdexcept>
#include <string>

namespace dkn {

// Typed error hierarchy. Every malformed input surfaces as one of these,
// never as a NaN result or a silent wrong answer.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// Bad layer/experiment configuration (mismatched specs, invalid keys).
struct ConfigError : Error {
    using Error::Error;
};

// Value outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Batch too small for an operation that needs at least two items.
struct DegenerateBatchError : Error {
    using Error::Error;
};

// A pixel not covered by any patch center.
struct CoverageError : Error {
    using Error::Error;
};

// Misuse of the autodiff API (non-scalar loss, tensor not on tape, ...).
struct UsageError : Error {
    using Error::Error;
};

// NaN/Inf encountered during training; carries the offending parameter name.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace dkn
