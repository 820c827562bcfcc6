#pragma once

#include <stdexcept>
#include <string>

namespace cfm {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/operation shape violations (channel mismatch, odd pooling dims, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid structural or hyperparameter configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Argument outside its mathematical domain (negative sigma, ...).
struct DomainError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, ...).
struct ContractError : Error {
    using Error::Error;
};

// Malformed or inconsistent serialized data.
struct LoadError : Error {
    using Error::Error;
};

// Operation applied to a network in the wrong structural state.
struct StructuralError : Error {
    using Error::Error;
};

// File/corpus level problems (missing directory, unreadable image, ...).
struct DataError : Error {
    using Error::Error;
};

}  // namespace cfm
