#pragma once

#include <stdexcept>
#include <string>

namespace elastomono {

// Precondition or input validation failure. Messages start with the module name.
class ValidationError : public std::runtime_error {
public:
    ValidationError(const std::string& module, const std::string& what)
        : std::runtime_error(module + ": " + what) {}
};

// Singular system, failed factorization, or a solve that missed its residual target.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& module, const std::string& what)
        : std::runtime_error(module + ": " + what) {}
};

} // namespace elastomono
