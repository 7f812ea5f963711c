#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fda {

enum class ErrorKind {
    ShapeMismatch,
    NonFinite,
    InvalidAxis,
    NotScalar,
    DetachedTensor,
    EmptyText,
    UnknownClass,
    LengthMismatch,
    InvalidPlacement,
    ParseError,
    TooLong,
    RangeError,
    EmptyCorpus,
    MissingTarget,
    ZeroSteps,
    SingletonBatch,
    ZeroCount,
    IoError,
    FormatError,
    EmptyRanks,
    InvalidIndex,
    InvalidConfig,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

// Non-fatal diagnostics (duplicate targets, clamped metrics, corpus fallbacks).
// The default sink writes "warning[<code>]: <message>" to stderr.
using WarningSink = std::function<void(std::string_view code, std::string_view message)>;

WarningSink set_warning_sink(WarningSink sink);
void warn(std::string_view code, std::string_view message);

} // namespace fda
