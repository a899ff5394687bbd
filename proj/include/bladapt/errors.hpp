#pragma once

#include <stdexcept>
#include <string>

namespace bladapt {

// Error taxonomy shared by the library and the CLI exit-code mapping:
// config/validation -> 1, I/O -> 2, numeric divergence -> 3.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

struct UnknownParameterError : Error {
    explicit UnknownParameterError(const std::string& msg) : Error(msg) {}
};

struct FrozenViolationError : Error {
    explicit FrozenViolationError(const std::string& msg) : Error(msg) {}
};

} // namespace bladapt
