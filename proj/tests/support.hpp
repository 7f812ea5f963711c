#pragma once

#include "fda/error.hpp"

#include "doctest.h"

#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace support {

struct CapturedWarnings {
    std::vector<std::string> codes;
    fda::WarningSink previous;
    CapturedWarnings() {
        previous = fda::set_warning_sink([this](std::string_view code, std::string_view) { codes.emplace_back(code); });
    }
    ~CapturedWarnings() { fda::set_warning_sink(previous); }

    bool saw(std::string_view code) const {
        for (const auto& c : codes)
            if (c == code) return true;
        return false;
    }
};

inline void expect_error(fda::ErrorKind kind, const std::function<void()>& body) {
    try {
        body();
        FAIL("expected " << fda::to_string(kind));
    } catch (const fda::Error& e) {
        CHECK(e.kind() == kind);
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace support
