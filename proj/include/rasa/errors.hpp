#pragma once
#include <stdexcept>
#include <string>

namespace rasa {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape disagreement between operands.
struct ShapeError final : Error {
    using Error::Error;
};

// Non-finite value produced by a forward operation, or an invalid numeric argument.
struct NumericError final : Error {
    using Error::Error;
};

// Malformed on-disk payload (bad magic, truncation, impossible dimensions).
struct ParseError final : Error {
    using Error::Error;
};

// A loaded structure violates its invariants.
struct ValidationError final : Error {
    using Error::Error;
};

// Bad configuration value or unusable command-line invocation.
struct ConfigError final : Error {
    using Error::Error;
};

struct IoError final : Error {
    using Error::Error;
};

// A statistic whose value is undefined on the given input (e.g. no comparable pairs).
struct UndefinedStatError final : Error {
    using Error::Error;
};

// Network-level failure after retries were exhausted.
struct TransportError final : Error {
    using Error::Error;
};

// The remote service answered but the payload is unusable (e.g. empty completion).
struct ContentError final : Error {
    using Error::Error;
};

}  // namespace rasa
