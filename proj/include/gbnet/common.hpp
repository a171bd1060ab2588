#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gbnet {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream oss;
    oss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << 'x';
        oss << shape[i];
    }
    oss << ']';
    return oss.str();
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ValueError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void shape_error(const std::string& msg) { throw ShapeError(msg); }

namespace debug {

// NaN/Inf guard after each primitive. On by default in debug builds; tests and
// the grad checker enable it explicitly.
inline bool& nan_checks() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

}  // namespace debug

}  // namespace gbnet
