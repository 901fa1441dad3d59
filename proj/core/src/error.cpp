#include "tokstd/error.hpp"

namespace tokstd {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::TooShort: return "too short";
    case ErrorKind::Truncation: return "truncation error";
    case ErrorKind::DegenerateSignal: return "degenerate signal";
    case ErrorKind::EmptyInput: return "empty input";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::State: return "state error";
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Input: return "input error";
    case ErrorKind::DegenerateCodeword: return "degenerate codeword";
    case ErrorKind::UndefinedEntropy: return "undefined entropy";
    case ErrorKind::Sampling: return "sampling error";
    case ErrorKind::EmptyIndex: return "empty index";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Numeric: return "numeric failure";
    case ErrorKind::Io: return "io error";
    }
    return "error";
}

} // namespace tokstd
