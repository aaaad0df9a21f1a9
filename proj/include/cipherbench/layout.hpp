#pragma once

#include "common.hpp"

// Guest address space layout. Everything, including both shadow planes, must
// stay below 2^31 so that any address is reachable as [anchor + disp32] with
// a signed 32-bit displacement.

namespace cb::layout {

inline constexpr u64 CODE_BASE = 0x0001'0000;
inline constexpr u64 CODE_LIMIT = 0x0010'0000;

inline constexpr u64 STATIC_BASE = 0x0010'0000;
inline constexpr u64 STATIC_LIMIT = 0x0020'0000;

// Runtime support data installed by the rewriter (allocation tracker, PRNG
// state, spill slab, realloc staging). Unused by unhardened programs.
inline constexpr u64 INSTR_DATA_BASE = 0x0020'0000;
inline constexpr u64 INSTR_DATA_LIMIT = 0x0040'0000;

inline constexpr u64 TRACKER_ADDR = INSTR_DATA_BASE;            // 8 bytes
inline constexpr u64 PRNG_XS_S0 = INSTR_DATA_BASE + 0x10;
inline constexpr u64 PRNG_XS_S1 = INSTR_DATA_BASE + 0x18;
inline constexpr u64 PRNG_AES_STATE = INSTR_DATA_BASE + 0x20;   // 16 bytes
inline constexpr u64 PRNG_AES_KEY = INSTR_DATA_BASE + 0x30;     // 16 bytes
inline constexpr u64 PRNG_AES_ACC = INSTR_DATA_BASE + 0x40;     // 16 bytes
inline constexpr u64 SPILL_BASE = INSTR_DATA_BASE + 0x100;      // 8-byte slots
inline constexpr u64 AES_TABLE_BASE = INSTR_DATA_BASE + 0x1000; // 4x1KiB
inline constexpr u64 STAGING_BASE = 0x0030'0000;                // realloc staging
inline constexpr u64 STAGING_LIMIT = 0x0038'0000;

inline constexpr u64 HEAP_BASE = 0x0040'0000;
inline constexpr u64 HEAP_LIMIT = 0x0E00'0000;

inline constexpr u64 STACK_GUARD_BASE = 0x0EF0'0000;
inline constexpr u64 STACK_BASE = 0x0F00'0000;
inline constexpr u64 STACK_TOP = 0x1000'0000;

// Input buffers and the conventional output window live in the statics region.
inline constexpr u64 INPUT_LEN_BASE = 0x001B'F000; // u64 per input slot
inline constexpr u64 INPUT_BASE = 0x001C'0000;
inline constexpr u64 INPUT_STRIDE = 0x1000;
inline constexpr unsigned MAX_INPUTS = 16;
inline constexpr u64 OUTPUT_BASE = 0x001E'0000;
inline constexpr u64 OUTPUT_LIMIT = 0x001F'0000;

// Constant distances from a data byte to its mask / secrecy byte.
inline constexpr u64 D_MASK = 0x3fff'f000;
inline constexpr u64 D_SECRECY = 0x2fff'f000;

inline constexpr u64 PAGE = 0x1000;

inline constexpr u64 align_down(u64 a, u64 g) { return a & ~(g - 1); }
inline constexpr u64 align_up(u64 a, u64 g) { return (a + g - 1) & ~(g - 1); }

// Data regions span [CODE_BASE, STACK_TOP); the shadow images of that span
// must not fold back into it or into each other.
static_assert(STACK_TOP + D_SECRECY > STACK_TOP, "no wrap");
static_assert(CODE_BASE + D_SECRECY >= STACK_TOP, "secrecy plane clear of data");
static_assert(CODE_BASE + D_MASK >= STACK_TOP + D_SECRECY, "planes disjoint");
static_assert(STACK_TOP + D_MASK < 0x8000'0000, "addresses fit signed disp32");

} // namespace cb::layout
