#pragma once

#include <stdexcept>
#include <string>

namespace xroute {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (bad file, dangling id, cycle, NaN...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Inputs that are individually valid but do not fit the requested operation.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Numeric breakdown during computation (divergence, overflow).
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace xroute
