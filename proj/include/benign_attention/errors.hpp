#pragma once

#include <stdexcept>
#include <string>

namespace battn {

/// Malformed or out-of-range configuration. The message starts with the
/// offending JSON path (e.g. "$.eta: ...").
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Inconsistent shapes or dimensions.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Input outside an operation's domain (NaN scores, zero noise in SNR, ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// A gradient or parameter became non-finite during training.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    [[nodiscard]] long step() const { return step_; }

private:
    long step_;
};

}  // namespace battn
