#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace resetopt {

// Error taxonomy. The CLI maps these onto exit-code categories; library code
// throws and never calls exit().
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or size mismatch between tensors, parameter sets, or datasets.
struct DimensionError : Error {
    using Error::Error;
};

// A scalar argument outside its documented domain.
struct ArgumentError : Error {
    using Error::Error;
};

// Malformed serialized input (binary snapshots, dataset files, CSV).
struct FormatError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// Invalid or unknown experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

inline bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline void require_finite(std::span<const double> xs, const std::string& what) {
    if (!all_finite(xs)) throw NumericError(what + ": non-finite value");
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ArgumentError(msg);
}

}  // namespace resetopt
