#pragma once

#include <cstdint>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cb {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i8 = std::int8_t;
using i32 = std::int32_t;
using i64 = std::int64_t;

using Bytes = std::vector<u8>;

// Host-side error (bad input files, malformed programs, contract violations).
// Guest runtime outcomes are reported as data, not exceptions.
class Error : public std::runtime_error {
public:
    explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

namespace detail {
inline void strf_cat(std::ostringstream&) {}
template <typename T, typename... Rest>
void strf_cat(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    strf_cat(os, rest...);
}
} // namespace detail

template <typename... Args>
std::string strf(const Args&... args) {
    std::ostringstream os;
    detail::strf_cat(os, args...);
    return os.str();
}

template <typename... Args>
[[noreturn]] void fail(const Args&... args) {
    throw Error(strf(args...));
}

inline std::string hex(u64 v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

// Little-endian scalar access over byte buffers.
inline u64 load_le(const u8* p, unsigned width) {
    u64 v = 0;
    for (unsigned i = 0; i < width; ++i)
        v |= u64(p[i]) << (8 * i);
    return v;
}

inline void store_le(u8* p, u64 v, unsigned width) {
    for (unsigned i = 0; i < width; ++i)
        p[i] = u8(v >> (8 * i));
}

inline void append_le(Bytes& out, u64 v, unsigned width) {
    for (unsigned i = 0; i < width; ++i)
        out.push_back(u8(v >> (8 * i)));
}

} // namespace cb
