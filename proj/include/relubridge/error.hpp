#pragma once

#include <stdexcept>
#include <string>

namespace relubridge {

enum class ErrorKind {
    Config,   // malformed configuration or architecture
    Shape,    // dimension / index mismatch at an API boundary
    Data,     // unreadable or malformed dataset / checkpoint
    Numeric,  // non-finite values, divergence, degenerate math
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

// CLI exit code for an error kind: 2 config, 3 data, 4 numeric.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Shape: return 2;
    case ErrorKind::Data: return 3;
    case ErrorKind::Numeric: return 4;
    }
    return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace relubridge
