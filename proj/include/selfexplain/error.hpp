#pragma once

#include <stdexcept>
#include <string>

namespace selfexplain {

// Error categories map 1:1 onto CLI exit codes so callers and scripts can
// distinguish "your config is wrong" from "the backend is down".
enum class ErrorKind {
    validation,   // bad input data or arguments
    config,       // bad experiment configuration, caught pre-flight
    transport,    // network / retry-exhausted failures
    protocol,     // backend answered with a terminal non-2xx or garbage
    capability,   // backend cannot do what was asked (e.g. no logprobs)
    script,       // mock script missing or malformed
    io,           // filesystem trouble
    internal,
};

inline const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::validation: return "validation";
        case ErrorKind::config: return "config";
        case ErrorKind::transport: return "transport";
        case ErrorKind::protocol: return "protocol";
        case ErrorKind::capability: return "capability";
        case ErrorKind::script: return "script";
        case ErrorKind::io: return "io";
        case ErrorKind::internal: return "internal";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::validation:
        case ErrorKind::config:
        case ErrorKind::io: return 2;
        case ErrorKind::transport: return 3;
        case ErrorKind::capability: return 4;
        case ErrorKind::protocol: return 5;
        case ErrorKind::script: return 6;
        case ErrorKind::internal: return 1;
    }
    return 1;
}

} // namespace selfexplain
