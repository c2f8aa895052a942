#pragma once

#include <stdexcept>
#include <string>

namespace flipguard {

enum class Errc {
    NonFinite,
    DegenerateLayer,
    OutOfRange,
    UnknownCoordinate,
    ParseError,
    RangeError,
    NotConditional,
    NonIdempotentActivation,
    BoundaryLayer,
    NotInstructionBoundary,
    RetriesExhausted,
    StaleLocation,
    ImageCorrupt,
    ConfigError,
    IoError,
};

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

} // namespace flipguard
