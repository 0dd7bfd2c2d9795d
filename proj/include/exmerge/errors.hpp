// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every exmerge module. Each error carries a kind
// that maps one-to-one onto the CLI exit-code contract.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace exmerge {

enum class ErrorKind {
    Validation = 2,     // bad parameters, recipes, plans
    Compatibility = 3,  // architecture signature mismatch
    Io = 4,             // unreadable, malformed or unwritable files; failing evaluators
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message) : Error(ErrorKind::Validation, message) {}
};

/// Two checkpoints do not share an architecture signature. `tensor()` names the
/// first tensor (in name order) at which they differ.
class SignatureMismatch : public Error {
public:
    SignatureMismatch(std::string tensor, const std::string& message)
        : Error(ErrorKind::Compatibility, message), tensor_(std::move(tensor)) {}

    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorKind::Io, message) {}
};

/// The container bytes are not a well-formed checkpoint file.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

}  // namespace exmerge
