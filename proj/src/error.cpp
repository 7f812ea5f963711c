#include "fda/error.hpp"

#include <iostream>
#include <mutex>

namespace fda {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::InvalidAxis: return "InvalidAxis";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::DetachedTensor: return "DetachedTensor";
    case ErrorKind::EmptyText: return "EmptyText";
    case ErrorKind::UnknownClass: return "UnknownClass";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::InvalidPlacement: return "InvalidPlacement";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::TooLong: return "TooLong";
    case ErrorKind::RangeError: return "RangeError";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::MissingTarget: return "MissingTarget";
    case ErrorKind::ZeroSteps: return "ZeroSteps";
    case ErrorKind::SingletonBatch: return "SingletonBatch";
    case ErrorKind::ZeroCount: return "ZeroCount";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::EmptyRanks: return "EmptyRanks";
    case ErrorKind::InvalidIndex: return "InvalidIndex";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    }
    return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

namespace {

std::mutex g_sink_mutex;

WarningSink& sink_slot() {
    static WarningSink sink = [](std::string_view code, std::string_view message) {
        std::cerr << "warning[" << code << "]: " << message << '\n';
    };
    return sink;
}

} // namespace

WarningSink set_warning_sink(WarningSink sink) {
    std::lock_guard lock(g_sink_mutex);
    WarningSink previous = std::move(sink_slot());
    sink_slot() = std::move(sink);
    return previous;
}

void warn(std::string_view code, std::string_view message) {
    std::lock_guard lock(g_sink_mutex);
    if (sink_slot()) sink_slot()(code, message);
}

} // namespace fda
