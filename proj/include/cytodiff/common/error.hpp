#pragma once

#include <stdexcept>
#include <string>

namespace cytodiff {

// Failure categories. Each maps onto one CLI exit code.
enum class ErrorKind {
    config,      // invalid configuration or arguments (exit 2)
    data,        // missing/corrupt inputs (exit 3)
    backend,     // generation backend failures (exit 4)
    incomplete,  // partial run, results preserved (exit 5)
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class BackendError : public Error {
public:
    BackendError(const std::string& what, bool retryable)
        : Error(ErrorKind::backend, what), retryable_(retryable) {}

    bool retryable() const noexcept { return retryable_; }

private:
    bool retryable_;
};

class IncompleteRunError : public Error {
public:
    explicit IncompleteRunError(const std::string& what) : Error(ErrorKind::incomplete, what) {}
};

inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::backend: return 4;
        case ErrorKind::incomplete: return 5;
    }
    return 1;
}

}  // namespace cytodiff
