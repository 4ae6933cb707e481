// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>

namespace moesq {

/// Base class for all library errors. `DomainError` and subclasses map to CLI exit code 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class InfeasibleError : public DomainError {
public:
    InfeasibleError(const std::string& what, std::int64_t shortfall)
        : DomainError(what), shortfall_(shortfall) {}
    [[nodiscard]] std::int64_t shortfall() const noexcept { return shortfall_; }

private:
    std::int64_t shortfall_;
};

// Decimal gigabytes, matching the 8·10^9 bits-per-GB reporting convention.
inline double to_gb(std::int64_t bytes) { return static_cast<double>(bytes) / 1e9; }

/// Worker count for fan-out stages: explicit value if > 0, else MOESQ_JOBS, else 1.
inline int resolve_jobs(int requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MOESQ_JOBS")) {
        try {
            int n = std::stoi(env);
            if (n > 0) return n;
        } catch (const std::exception&) {
        }
    }
    return 1;
}

} // namespace moesq
