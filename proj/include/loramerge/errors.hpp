// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace loramerge {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (and the CLI exit-code mapping) can tell operator misuse apart
// from data problems and numerical failures.

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Conformability violations; the message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Caller passed an out-of-range or inconsistent argument.
struct ArgumentError : Error {
    using Error::Error;
};

// Numerical failure: divergence, NaN mid-computation, non-convergence.
struct NumericError : Error {
    using Error::Error;
};

// Malformed container or config; carries a byte offset when known.
struct ParseError : Error {
    ParseError(const std::string& what, long long byte_offset = -1)
        : Error(byte_offset >= 0 ? what + " (byte offset " + std::to_string(byte_offset) + ")"
                                 : what),
          offset(byte_offset) {}
    long long offset;
};

struct IoError : Error {
    using Error::Error;
};

// Adapter failed a structural check that load refuses to ignore.
struct ValidationError : Error {
    using Error::Error;
};

// An API contract was violated (e.g. backward on a non-scalar node).
struct ContractError : Error {
    using Error::Error;
};

}  // namespace loramerge
