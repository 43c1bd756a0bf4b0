#pragma once

#include <stdexcept>
#include <string>

namespace gradflow {

// Error taxonomy shared by all modules. The CLI maps `numeric` to exit
// code 3 and everything else to exit code 2.
enum class ErrorKind {
    invalid_argument,
    insufficient_data,
    domain,
    config,
    state,
    shape,
    numeric,
    format,
    consistency,
    io,
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::insufficient_data: return "insufficient-data";
        case ErrorKind::domain: return "domain";
        case ErrorKind::config: return "configuration";
        case ErrorKind::state: return "state";
        case ErrorKind::shape: return "shape";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::format: return "format";
        case ErrorKind::consistency: return "consistency";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

} // namespace gradflow
