#pragma once

#include <stdexcept>
#include <string>

namespace kctag {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// usage/config -> 2, backend -> 3, data/format -> 4.

// Bad command line or invalid operator-supplied configuration.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misconfigured backend or incompatible stored state (wrong dims, HTTP 4xx).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Transport-level failure after retries are exhausted.
struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unreadable or version-incompatible serialized artifact.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition. Always a bug, never operator input.
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace kctag
