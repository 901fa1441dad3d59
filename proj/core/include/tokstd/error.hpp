#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tokstd {

/// Failure categories surfaced by the library. The CLI maps these onto exit
/// codes (usage = 1, data = 2, numeric = 3).
enum class ErrorKind {
    Format,           // malformed file contents
    Unsupported,      // well-formed but unsupported encoding
    TooShort,         // clip shorter than an analysis window
    Truncation,       // input longer than the requested fixed length
    DegenerateSignal, // zero-power speech, noise or RIR
    EmptyInput,
    Shape,            // dimension mismatch
    State,            // missing forward cache and similar sequencing errors
    Parameter,        // invalid hyperparameter value
    Input,            // invalid numeric input (NaN scores, bad ranges)
    DegenerateCodeword,
    UndefinedEntropy,
    Sampling,         // no negatives available
    EmptyIndex,
    Config,
    Numeric,          // NaN/Inf detected during optimisation
    Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) {
        throw Error(kind, what);
    }
}

} // namespace tokstd
