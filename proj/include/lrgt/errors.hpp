#pragma once

#include <stdexcept>
#include <string>

namespace lrgt {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not line up for the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A configuration value is invalid or inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

// A caller violated an API precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

// An index is out of range or not a valid permutation.
class IndexError : public Error {
public:
    using Error::Error;
};

// A non-finite value was produced by a numeric operation.
class NumericError : public Error {
public:
    using Error::Error;
};

// File format or filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace lrgt
