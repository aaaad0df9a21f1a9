#pragma once

#include "common.hpp"

#include <array>
#include <cstring>

namespace cb {

inline u64 fnv1a64(const u8* data, size_t len, u64 h = 0xcbf29ce484222325ULL) {
    for (size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline u64 fnv1a64(const Bytes& b) { return fnv1a64(b.data(), b.size()); }

inline u64 splitmix64(u64& state) {
    u64 z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// SipHash-2-4 with 128-bit output. Used as the keyed digest behind the
// memory-encryption equality oracle; the attacker only ever compares tags.
class SipHash128 {
public:
    SipHash128(u64 k0, u64 k1) : k0_(k0), k1_(k1) {}

    std::array<u8, 16> digest(const u8* data, size_t len) const {
        u64 v0 = 0x736f6d6570736575ULL ^ k0_;
        u64 v1 = 0x646f72616e646f6dULL ^ k1_ ^ 0xee;
        u64 v2 = 0x6c7967656e657261ULL ^ k0_;
        u64 v3 = 0x7465646279746573ULL ^ k1_;

        auto rotl = [](u64 x, int b) { return (x << b) | (x >> (64 - b)); };
        auto round = [&] {
            v0 += v1; v1 = rotl(v1, 13); v1 ^= v0; v0 = rotl(v0, 32);
            v2 += v3; v3 = rotl(v3, 16); v3 ^= v2;
            v0 += v3; v3 = rotl(v3, 21); v3 ^= v0;
            v2 += v1; v1 = rotl(v1, 17); v1 ^= v2; v2 = rotl(v2, 32);
        };

        size_t full = len / 8;
        for (size_t i = 0; i < full; ++i) {
            u64 m = load_le(data + 8 * i, 8);
            v3 ^= m;
            round(); round();
            v0 ^= m;
        }
        u64 tail = u64(len & 0xff) << 56;
        for (size_t i = 0; i < (len & 7); ++i)
            tail |= u64(data[full * 8 + i]) << (8 * i);
        v3 ^= tail;
        round(); round();
        v0 ^= tail;

        v2 ^= 0xee;
        round(); round(); round(); round();
        u64 lo = v0 ^ v1 ^ v2 ^ v3;
        v1 ^= 0xdd;
        round(); round(); round(); round();
        u64 hi = v0 ^ v1 ^ v2 ^ v3;

        std::array<u8, 16> out{};
        store_le(out.data(), lo, 8);
        store_le(out.data() + 8, hi, 8);
        return out;
    }

private:
    u64 k0_, k1_;
};

} // namespace cb
