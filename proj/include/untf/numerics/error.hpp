#pragma once

#include <stdexcept>
#include <string>

namespace untf {

/// Root of every error the library throws. Each subclass maps to one CLI
/// exit code (see tools/untf.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad shapes, out-of-range indices, malformed config, invalid arguments.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// A forward value or loss became NaN/Inf.
class NumericFault : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Truncated or otherwise malformed file contents.
class CorruptionError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace untf
