#pragma once

#include <stdexcept>
#include <string>

namespace emcad {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes, channel/group mismatches, bad geometry.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Bad user input: config values, arguments, data outside its domain.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated files (NPY, checkpoints, manifests).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace emcad
