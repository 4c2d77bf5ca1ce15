#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace r2if {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// A JSON value that cannot be canonicalized (non-finite number).
class InvalidValueError : public Error {
public:
    using Error::Error;
};

/// A RewardConfig or environment field outside its allowed range.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A dataset line that violates the instance schema or its invariants.
/// `line` is 1-based; 0 means the error is not tied to a specific line.
class DatasetError : public Error {
public:
    DatasetError(std::size_t line, std::string field, std::string reason)
        : Error(format(line, field, reason)), line_(line), field_(std::move(field)), reason_(std::move(reason)) {}

    std::size_t line() const { return line_; }
    const std::string& field() const { return field_; }
    const std::string& reason() const { return reason_; }

    static std::string format(std::size_t line, const std::string& field, const std::string& reason) {
        std::string msg;
        if (line > 0) {
            msg += "line " + std::to_string(line) + ": ";
        }
        if (!field.empty()) {
            msg += field + ": ";
        }
        msg += reason;
        return msg;
    }

private:
    std::size_t line_;
    std::string field_;
    std::string reason_;
};

/// A model backend failed after exhausting retries. `component` names the
/// failing backend ("student", "embedding").
class BackendError : public Error {
public:
    BackendError(std::string component, const std::string& detail)
        : Error(component + ": " + detail), component_(std::move(component)) {}

    const std::string& component() const { return component_; }

private:
    std::string component_;
};

/// A scripted mock backend was asked for an entry it does not have.
class MockMissError : public BackendError {
public:
    MockMissError(std::string component, const std::string& detail)
        : BackendError(std::move(component), detail) {}
};

/// Caller-supplied input that is structurally wrong (missing ids, empty sets).
class InputError : public Error {
public:
    using Error::Error;
};

/// Group normalization needs at least two rollouts.
class GroupTooSmallError : public Error {
public:
    using Error::Error;
};

/// A rollout group is missing data the objective needs (log-probabilities).
class InvalidGroupError : public Error {
public:
    using Error::Error;
};

}  // namespace r2if
