#pragma once

#include <stdexcept>
#include <string>

namespace liom {

// Data/usage problems: bad files, bad timestamps, missing coverage.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : DataError {
    ParseError(const std::string& path, int line, const std::string& what)
        : DataError(path + ":" + std::to_string(line) + ": " + what),
          line_number(line) {}
    int line_number;
};

struct NonMonotonicTime : DataError {
    NonMonotonicTime(const std::string& path, int line)
        : DataError(path + ":" + std::to_string(line) + ": non-monotonic timestamp"),
          line_number(line) {}
    int line_number;
};

struct InsufficientSamples : DataError {
    using DataError::DataError;
};

struct InsufficientData : DataError {
    using DataError::DataError;
};

struct SpanNotCovered : DataError {
    using DataError::DataError;
};

struct MissingUpm : DataError {
    using DataError::DataError;
};

struct LengthMismatch : DataError {
    using DataError::DataError;
};

struct IoError : DataError {
    using DataError::DataError;
};

// Numerical problems: non-finite costs, singular systems.
struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateGeometry : NumericalFailure {
    using NumericalFailure::NumericalFailure;
};

struct NonFiniteReading : NumericalFailure {
    using NumericalFailure::NumericalFailure;
};

}  // namespace liom
