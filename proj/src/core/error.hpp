#pragma once

#include <stdexcept>
#include <string>

namespace headgate {

enum class errc {
    shape,
    range,
    input,
    format,
    training,
    degenerate_data,
    tap,
    compatibility,
    region,
    length,
    spec,
    io,
    internal,
};

const char* errc_name(errc c);

class Error : public std::runtime_error {
public:
    Error(errc code, const std::string& msg)
        : std::runtime_error(std::string(errc_name(code)) + " error: " + msg), code_(code) {}
    errc code() const { return code_; }

private:
    errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool ok, errc code, const std::string& msg) {
    if (!ok) fail(code, msg);
}

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::shape: return "shape";
        case errc::range: return "range";
        case errc::input: return "input";
        case errc::format: return "format";
        case errc::training: return "training";
        case errc::degenerate_data: return "degenerate data";
        case errc::tap: return "tap";
        case errc::compatibility: return "compatibility";
        case errc::region: return "region";
        case errc::length: return "length";
        case errc::spec: return "spec";
        case errc::io: return "io";
        case errc::internal: return "internal";
    }
    return "unknown";
}

} // namespace headgate
