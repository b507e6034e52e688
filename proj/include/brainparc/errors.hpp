#pragma once

#include <stdexcept>
#include <string>

namespace brainparc {

// Bad user-supplied configuration. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent data encountered at runtime. CLI exit code 1.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem or serialization failure. CLI exit code 1.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Internal wiring bug (e.g. a mismatched skip pairing), not a user error.
struct WiringError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace brainparc
