// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cmmix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, missing grad, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid data handed to a pure function (empty waveform, non-positive duration, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration. `path()` names the offending field, e.g. "train.lr".
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& what)
        : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// File missing, unreadable, or malformed on disk.
class IoError : public Error {
public:
    using Error::Error;
};

/// Training produced a NaN or infinite loss.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

}  // namespace cmmix
