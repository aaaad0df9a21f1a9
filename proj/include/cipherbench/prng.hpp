#pragma once

#include "hash.hpp"
#include "program.hpp"

#include <array>

// Mask generators. Three kinds share one interface: a fast xorshift128+, a
// one-round-AES generator over a 16-byte state, and the OS-provided secure
// source (deterministic per os-seed in this VM). A fourth, fixed-output kind
// exists as a test hook for forcing mask reuse.
//
// The host implementations here are the reference the emitted guest code
// must reproduce bit for bit.

namespace cb {

struct Xs128pState {
    u64 s0 = 0;
    u64 s1 = 0;
};

inline u64 xs128p_next(Xs128pState& st) {
    u64 a = st.s0;
    const u64 b = st.s1;
    st.s0 = b;
    a ^= a << 23;
    a ^= a >> 17;
    a ^= b ^ (b >> 26);
    st.s1 = a;
    return a + b;
}

namespace aes {

inline u8 gf_mul(u8 a, u8 b) {
    u8 p = 0;
    while (b) {
        if (b & 1)
            p ^= a;
        bool hi = a & 0x80;
        a <<= 1;
        if (hi)
            a ^= 0x1b;
        b >>= 1;
    }
    return p;
}

inline u8 gf_inv(u8 a) {
    if (a == 0)
        return 0;
    // a^254 in GF(2^8)
    u8 r = 1;
    u8 base = a;
    int e = 254;
    while (e) {
        if (e & 1)
            r = gf_mul(r, base);
        base = gf_mul(base, base);
        e >>= 1;
    }
    return r;
}

inline u8 sbox(u8 x) {
    u8 b = gf_inv(x);
    auto rotl8 = [](u8 v, int n) { return u8(v << n | v >> (8 - n)); };
    return u8(b ^ rotl8(b, 1) ^ rotl8(b, 2) ^ rotl8(b, 3) ^ rotl8(b, 4) ^ 0x63);
}

// Column-packed round tables, little-endian byte order: byte 0 of each entry
// is the row-0 output. Entry layout matches the guest's 32-bit loads.
inline const std::array<std::array<u32, 256>, 4>& tables() {
    static const auto t = [] {
        std::array<std::array<u32, 256>, 4> out{};
        for (unsigned x = 0; x < 256; ++x) {
            u8 s = sbox(u8(x));
            u8 s2 = gf_mul(s, 2);
            u8 s3 = gf_mul(s, 3);
            out[0][x] = u32(s2) | u32(s) << 8 | u32(s) << 16 | u32(s3) << 24;
            out[1][x] = u32(s3) | u32(s2) << 8 | u32(s) << 16 | u32(s) << 24;
            out[2][x] = u32(s) | u32(s3) << 8 | u32(s2) << 16 | u32(s) << 24;
            out[3][x] = u32(s) | u32(s) << 8 | u32(s3) << 16 | u32(s2) << 24;
        }
        return out;
    }();
    return t;
}

// One forward round: SubBytes, ShiftRows, MixColumns, AddRoundKey. State is
// 16 bytes in standard order (byte k sits in row k%4, column k/4).
inline void round(std::array<u8, 16>& state, const std::array<u8, 16>& key) {
    const auto& te = tables();
    std::array<u8, 16> out{};
    for (unsigned c = 0; c < 4; ++c) {
        u32 w = te[0][state[4 * c + 0]] ^ te[1][state[4 * ((c + 1) & 3) + 1]] ^
                te[2][state[4 * ((c + 2) & 3) + 2]] ^ te[3][state[4 * ((c + 3) & 3) + 3]];
        w ^= u32(load_le(key.data() + 4 * c, 4));
        store_le(out.data() + 4 * c, w, 4);
    }
    state = out;
}

} // namespace aes

struct PrngState {
    PrngKind kind = PrngKind::Xs128p;
    Xs128pState xs{};
    std::array<u8, 16> aes_state{};
    std::array<u8, 16> aes_key{};
    u64 secure_stream = 0; // handle into the OS randomness stream
    u64 fixed_value = 0;
};

// Seeds a generator; all initial state material is drawn from the secure
// source behind `seed`.
inline PrngState prng_seed(PrngKind kind, u64 seed) {
    PrngState st;
    st.kind = kind;
    u64 s = seed ^ 0xa076'1d64'78bd'642fULL;
    switch (kind) {
    case PrngKind::Xs128p:
        st.xs.s0 = splitmix64(s);
        st.xs.s1 = splitmix64(s);
        if (st.xs.s0 == 0 && st.xs.s1 == 0)
            st.xs.s1 = 1; // all-zero state is outside the generator's cycle
        break;
    case PrngKind::AesRound:
        for (int i = 0; i < 2; ++i) {
            store_le(st.aes_state.data() + 8 * i, splitmix64(s), 8);
            store_le(st.aes_key.data() + 8 * i, splitmix64(s), 8);
        }
        break;
    case PrngKind::Secure:
        st.secure_stream = s;
        break;
    case PrngKind::Fixed:
        st.fixed_value = seed;
        break;
    }
    return st;
}

inline u64 prng_next(PrngState& st, unsigned width_bits = 64) {
    if (width_bits != 8 && width_bits != 16 && width_bits != 32 && width_bits != 64)
        fail("mask width must be 8, 16, 32 or 64 bits");
    u64 v = 0;
    switch (st.kind) {
    case PrngKind::Xs128p:
        if (st.xs.s0 == 0 && st.xs.s1 == 0)
            fail("xorshift128+ state must not be all zero");
        v = xs128p_next(st.xs);
        break;
    case PrngKind::AesRound:
        aes::round(st.aes_state, st.aes_key);
        v = load_le(st.aes_state.data(), 8);
        break;
    case PrngKind::Secure:
        v = splitmix64(st.secure_stream);
        break;
    case PrngKind::Fixed:
        v = st.fixed_value;
        break;
    }
    return width_bits >= 64 ? v : v & ((u64(1) << width_bits) - 1);
}

} // namespace cb
