#pragma once

#include "prng.hpp"
#include "report.hpp"

#include <algorithm>
#include <optional>

// Static instrumentation. Basic blocks that contain instrumented
// instructions are redirected from their original heads into an instrument
// section (5-byte jump, 2-byte hop via a neighbor's dead bytes, or 1-byte
// break with a dispatch entry). Secret-touching accesses are replaced by
// masked sequences; function entries get frame-shadow gadgets; allocation
// sites get tracker updates and shadow initialization.

namespace cb {

class RewriteError : public Error {
public:
    RewriteError(std::string msg, std::vector<u64> sites = {})
        : Error(sites.empty() ? msg : strf(msg, " at ", format_sites(sites))),
          sites(std::move(sites)) {}
    std::vector<u64> sites;

private:
    static std::string format_sites(const std::vector<u64>& s) {
        std::string out;
        for (size_t i = 0; i < s.size() && i < 16; ++i)
            out += (i ? ", " : "") + hex(s[i]);
        if (s.size() > 16)
            out += ", ...";
        return out;
    }
};

// --- Trampoline planning -----------------------------------------------------

enum class PatchKind : u8 { NearJump, ShortHop, BreakTrap };

struct PatchEntry {
    PatchKind kind = PatchKind::NearJump;
    u64 hop_slot = 0; // ShortHop: address of the hosted 5-byte jump
};

struct PatchPlan {
    std::map<u64, PatchEntry> entries; // block start -> patch
};

inline PatchPlan plan_trampolines(const BasicBlockTable& blocks,
                                  const std::set<u64>& redirected) {
    PatchPlan plan;
    struct Spare {
        u64 lo, hi;
    };
    std::vector<Spare> spares;

    // phase 1: blocks big enough for a direct 5-byte jump
    for (const auto& b : blocks.blocks) {
        if (!redirected.count(b.start))
            continue;
        u64 size = b.end - b.start;
        if (size >= 5) {
            plan.entries[b.start] = {PatchKind::NearJump, 0};
            if (size > 5)
                spares.push_back({b.start + 5, b.end});
        }
    }
    // phase 2: short hops into spare bytes, else break
    for (const auto& b : blocks.blocks) {
        if (!redirected.count(b.start) || plan.entries.count(b.start))
            continue;
        u64 size = b.end - b.start;
        if (size >= 2) {
            // short jump target is relative to the end of the 2-byte patch
            u64 from = b.start + 2;
            bool placed = false;
            for (auto& sp : spares) {
                if (sp.hi - sp.lo < 5)
                    continue;
                i64 rel = i64(sp.lo) - i64(from);
                if (rel < -128 || rel > 127)
                    continue;
                plan.entries[b.start] = {PatchKind::ShortHop, sp.lo};
                sp.lo += 5;
                placed = true;
                break;
            }
            if (placed)
                continue;
        }
        plan.entries[b.start] = {PatchKind::BreakTrap, 0};
    }
    return plan;
}

// --- Instrument-section code builder ----------------------------------------

class CodeBuilder {
public:
    using Label = size_t;

    Label new_label() {
        labels_.push_back(-1);
        return labels_.size() - 1;
    }
    void bind(Label l) { labels_[l] = i64(size_); }
    u64 size() const { return size_; }

    void emit(Instruction in) {
        size_ += encoded_length(in.op);
        slots_.push_back({in, -1, -1});
    }
    void branch(Op op, Label l) {
        Instruction in;
        in.op = op;
        size_ += encoded_length(op);
        slots_.push_back({in, i64(l), -1});
    }
    void branch_abs(Op op, u64 target) {
        Instruction in;
        in.op = op;
        size_ += encoded_length(op);
        slots_.push_back({in, -1, i64(target)});
    }

    // helpers
    void mov_ri(unsigned rd, u64 v) {
        Instruction in;
        in.op = Op::MovImm;
        in.rd = u8(rd);
        in.imm = i64(v);
        emit(in);
    }
    void mov_rr(unsigned rd, unsigned rs) {
        Instruction in;
        in.op = Op::MovRR;
        in.rd = u8(rd);
        in.rs = u8(rs);
        emit(in);
    }
    void alu_rr(Op op, unsigned rd, unsigned rs) {
        Instruction in;
        in.op = op;
        in.rd = u8(rd);
        in.rs = u8(rs);
        emit(in);
    }
    void alu_ri(Op op, unsigned rd, i8 imm) {
        Instruction in;
        in.op = op;
        in.rd = u8(rd);
        in.aux = u8(imm);
        emit(in);
    }
    void shift_ri(Op op, unsigned rd, unsigned amount) {
        Instruction in;
        in.op = op;
        in.rd = u8(rd);
        in.aux = u8(amount);
        emit(in);
    }
    void load(unsigned rd, unsigned base, i64 disp, u8 width) {
        Instruction in;
        in.op = Op::Load;
        in.rd = u8(rd);
        in.mem = {u8(base), checked_disp(disp), width};
        in.has_mem = true;
        emit(in);
    }
    void store(unsigned base, i64 disp, unsigned rs, u8 width) {
        Instruction in;
        in.op = Op::Store;
        in.rd = u8(rs);
        in.mem = {u8(base), checked_disp(disp), width};
        in.has_mem = true;
        emit(in);
    }
    void marker(u8 id, bool begin) {
        Instruction in;
        in.op = Op::Marker;
        in.aux = u8(id | (begin ? 0x80 : 0));
        emit(in);
    }
    void flag_save(unsigned rd) {
        Instruction in;
        in.op = Op::FlagSave;
        in.rd = u8(rd);
        emit(in);
    }
    void flag_rest(unsigned rs) {
        Instruction in;
        in.op = Op::FlagRest;
        in.rs = u8(rs);
        emit(in);
    }

    static i32 checked_disp(i64 disp) {
        if (disp < i64(INT32_MIN) || disp > i64(INT32_MAX))
            throw RewriteError(strf("displacement ", disp, " exceeds signed 32 bits"));
        return i32(disp);
    }

    Bytes finalize(u64 base) const {
        Bytes out;
        // first pass already fixed sizes; now compute offsets and resolve
        u64 off = 0;
        std::vector<u64> at(slots_.size());
        for (size_t i = 0; i < slots_.size(); ++i) {
            at[i] = off;
            off += encoded_length(slots_[i].in.op);
        }
        for (size_t i = 0; i < slots_.size(); ++i) {
            Instruction in = slots_[i].in;
            if (slots_[i].label >= 0) {
                i64 target_off = labels_[size_t(slots_[i].label)];
                if (target_off < 0)
                    throw RewriteError("unbound label in emitted code");
                in.imm = target_off - i64(at[i] + encoded_length(in.op));
            } else if (slots_[i].abs >= 0) {
                in.imm = slots_[i].abs - i64(base + at[i] + encoded_length(in.op));
            }
            Bytes e = encode(in);
            out.insert(out.end(), e.begin(), e.end());
        }
        return out;
    }

private:
    struct Slot {
        Instruction in;
        i64 label;
        i64 abs;
    };
    std::vector<Slot> slots_;
    std::vector<i64> labels_;
    u64 size_ = 0;
};

// --- Rewrite context ---------------------------------------------------------

struct RewriteOptions {
    Variant variant = Variant::Enhanced;
    PrngKind prng = PrngKind::Xs128p;
    u64 seed = 1;
    bool reseed = false;
};

namespace rw {

struct Ctx {
    const Program& prog;
    const AnalysisReport& rep;
    RewriteOptions opts;
    unsigned anchor = 14, aux = 12, val = 13;
    CodeBuilder b;
    CodeBuilder::Label aes_routine{};
    bool has_aes_routine = false;
    u64 fixed_mask = 0; // PrngKind::Fixed test hook value
};

inline constexpr u64 FLAG_SLOT = layout::INSTR_DATA_BASE + 0xf8;
inline constexpr u64 RSIZE_SLOT = layout::INSTR_DATA_BASE + 0xf0;

// Draws 64 fresh mask bits into ctx.val; clobbers ctx.aux and flags.
inline void emit_draw(Ctx& c) {
    CodeBuilder& b = c.b;
    const unsigned A = c.anchor, X = c.aux, V = c.val;
    switch (c.opts.prng) {
    case PrngKind::Xs128p: {
        b.load(V, A, i64(layout::PRNG_XS_S0), 8); // a = s0
        b.load(X, A, i64(layout::PRNG_XS_S1), 8); // b = s1
        b.store(A, i64(layout::PRNG_XS_S0), X, 8); // s0' = b
        b.mov_rr(X, V);
        b.shift_ri(Op::ShlRI, X, 23);
        b.alu_rr(Op::XorRR, V, X); // a ^= a << 23
        b.mov_rr(X, V);
        b.shift_ri(Op::ShrRI, X, 17);
        b.alu_rr(Op::XorRR, V, X); // a ^= a >> 17
        b.load(X, A, i64(layout::PRNG_XS_S0), 8);
        b.alu_rr(Op::XorRR, V, X); // a ^= b
        b.shift_ri(Op::ShrRI, X, 26);
        b.alu_rr(Op::XorRR, V, X); // a ^= b >> 26
        b.store(A, i64(layout::PRNG_XS_S1), V, 8); // s1' = a
        b.load(X, A, i64(layout::PRNG_XS_S0), 8);
        b.alu_rr(Op::AddRR, V, X); // out = a + b
        break;
    }
    case PrngKind::AesRound:
        b.branch(Op::Call, c.aes_routine);
        break;
    case PrngKind::Secure: {
        Instruction in;
        in.op = Op::Rand;
        in.rd = u8(V);
        b.emit(in);
        break;
    }
    case PrngKind::Fixed:
        b.mov_ri(V, c.fixed_mask);
        break;
    }
}

// Resamples until the low `width` bytes of the draw are nonzero.
inline void emit_draw_nonzero(Ctx& c, unsigned width) {
    CodeBuilder& b = c.b;
    auto again = b.new_label();
    b.bind(again);
    emit_draw(c);
    if (width >= 8) {
        b.alu_rr(Op::AndRR, c.val, c.val); // sets ZF
    } else {
        b.mov_rr(c.aux, c.val);
        b.shift_ri(Op::ShlRI, c.aux, 64 - 8 * width);
    }
    b.branch(Op::Jz, again);
}

// Shared one-round-AES mask routine. State and key live in the instrument
// data area; the round runs over the embedded column tables using only the
// two reserved registers plus in-memory accumulators.
inline void emit_aes_routine(Ctx& c) {
    CodeBuilder& b = c.b;
    const unsigned A = c.anchor, X = c.aux, V = c.val;
    c.aes_routine = b.new_label();
    c.has_aes_routine = true;
    b.bind(c.aes_routine);
    // acc[c] = 0
    b.mov_ri(V, 0);
    for (unsigned col = 0; col < 4; ++col)
        b.store(A, i64(layout::PRNG_AES_ACC + 4 * col), V, 4);
    // acc[c] ^= Te_r[state byte (r, c+r)]
    for (unsigned col = 0; col < 4; ++col) {
        for (unsigned row = 0; row < 4; ++row) {
            unsigned byte_index = 4 * ((col + row) & 3) + row;
            unsigned word = byte_index / 8;
            unsigned bit = 8 * (byte_index % 8);
            b.load(X, A, i64(layout::PRNG_AES_STATE + 8 * word), 8);
            if (bit != 56)
                b.shift_ri(Op::ShlRI, X, 56 - bit);
            b.shift_ri(Op::ShrRI, X, 56);
            b.shift_ri(Op::ShlRI, X, 2);
            b.load(V, X, i64(layout::AES_TABLE_BASE + 1024 * row), 4);
            Instruction x;
            x.op = Op::MXor;
            x.rd = u8(V);
            x.mem = {u8(A), i32(layout::PRNG_AES_ACC + 4 * col), 4};
            x.has_mem = true;
            b.emit(x);
        }
    }
    // acc ^= round key; state = acc
    for (unsigned w = 0; w < 2; ++w) {
        b.load(V, A, i64(layout::PRNG_AES_KEY + 8 * w), 8);
        Instruction x;
        x.op = Op::MXor;
        x.rd = u8(V);
        x.mem = {u8(A), i32(layout::PRNG_AES_ACC + 8 * w), 8};
        x.has_mem = true;
        b.emit(x);
        b.load(V, A, i64(layout::PRNG_AES_ACC + 8 * w), 8);
        b.store(A, i64(layout::PRNG_AES_STATE + 8 * w), V, 8);
    }
    b.load(V, A, i64(layout::PRNG_AES_STATE), 8); // output = low 8 state bytes
    Instruction ret;
    ret.op = Op::Ret;
    b.emit(ret);
}

// Per-insertion register and flag management. Scratch registers come from
// the liveness table; missing ones are spilled to the slab behind a fresh
// mask so a spilled secret never reaches memory in the clear.
class Seq {
public:
    enum class Mode { After, Before }; // which liveness point feeds the pool

    Seq(Ctx& c, u64 site, u16 operand_regs, bool need_flags, Mode mode = Mode::After)
        : c_(c), site_(site) {
        u16 reserved = u16((1u << c.anchor) | (1u << c.aux) | (1u << c.val));
        forbidden_ = u16(operand_regs | reserved | (1u << SP));
        u16 live_pool = mode == Mode::After ? c.rep.liveness.scratch(site)
                                            : c.rep.liveness.scratch_before(site);
        pool_ = u16(live_pool & ~forbidden_);
        if (need_flags) {
            c_.b.flag_save(c_.val);
            c_.b.store(c_.anchor, i64(FLAG_SLOT), c_.val, 1);
            flags_saved_ = true;
        }
    }

    // Capture flags mid-sequence (for RMW sites the replayed ALU step makes
    // the flags that must survive to the end).
    void capture_flags() {
        c_.b.flag_save(c_.val);
        c_.b.store(c_.anchor, i64(FLAG_SLOT), c_.val, 1);
        flags_saved_ = true;
    }

    unsigned acquire() {
        for (unsigned r = 0; r < 16; ++r) {
            u16 bit = u16(1) << r;
            if ((pool_ & bit) && !(taken_ & bit)) {
                taken_ |= bit;
                return r;
            }
        }
        // spill a victim
        for (unsigned r = 0; r < 16; ++r) {
            u16 bit = u16(1) << r;
            if ((forbidden_ | taken_) & bit)
                continue;
            u64 slot = layout::SPILL_BASE + 16 * spills_.size();
            emit_draw_nonzero(c_, 8);
            c_.b.store(c_.anchor, i64(slot + layout::D_MASK), c_.val, 8);
            c_.b.mov_rr(c_.aux, r);
            c_.b.alu_rr(Op::XorRR, c_.aux, c_.val);
            c_.b.store(c_.anchor, i64(slot), c_.aux, 8);
            spills_.push_back({r, slot});
            taken_ |= bit;
            return r;
        }
        throw RewriteError("no scratch register available", {site_});
    }

    void close() {
        for (size_t i = spills_.size(); i-- > 0;) {
            auto [r, slot] = spills_[i];
            c_.b.load(c_.val, c_.anchor, i64(slot), 8);
            c_.b.load(c_.aux, c_.anchor, i64(slot + layout::D_MASK), 8);
            c_.b.alu_rr(Op::XorRR, c_.val, c_.aux);
            c_.b.mov_rr(r, c_.val);
        }
        if (flags_saved_) {
            c_.b.load(c_.val, c_.anchor, i64(FLAG_SLOT), 1);
            c_.b.flag_rest(c_.val);
        }
    }

private:
    Ctx& c_;
    u64 site_;
    u16 forbidden_ = 0;
    u16 pool_ = 0;
    u16 taken_ = 0;
    bool flags_saved_ = false;
    std::vector<std::pair<unsigned, u64>> spills_;
};

inline u16 operand_mask(const Instruction& in) {
    RegUse u = reg_use(in);
    return u16(u.reads | u.writes);
}

// masks the value in `reg` down to `width` bytes in place (no-op for 8)
inline void emit_truncate(Ctx& c, unsigned reg, unsigned width) {
    if (width >= 8)
        return;
    c.b.shift_ri(Op::ShlRI, reg, 64 - 8 * width);
    c.b.shift_ri(Op::ShrRI, reg, 64 - 8 * width);
}

// --- Masked access sequences -------------------------------------------------
// Emitters take explicit scratch registers from the caller's Seq; the draw
// helpers clobber ctx.aux/ctx.val and flags. ctx.aux doubles as a pre-draw
// temporary inside the emitters.

// dest <- decoded [base+disp] at width w. dest and t1 must differ from base.
inline void emit_decode_read(Ctx& c, unsigned base, i64 disp, u8 w, unsigned dest,
                             unsigned t1) {
    CodeBuilder& b = c.b;
    b.load(t1, base, disp + i64(layout::D_MASK), w);
    if (c.opts.variant != Variant::Fast) {
        b.load(c.aux, base, disp + i64(layout::D_SECRECY), w);
        b.alu_rr(Op::AndRR, t1, c.aux);
    }
    b.load(dest, base, disp, w);
    b.alu_rr(Op::XorRR, dest, t1);
}

// [base+disp] <- src at width w, always drawing a fresh mask (Base rules).
inline void emit_base_write(Ctx& c, unsigned base, i64 disp, u8 w, unsigned src,
                            unsigned t1) {
    CodeBuilder& b = c.b;
    emit_draw(c);
    b.store(base, disp + i64(layout::D_MASK), c.val, w);
    b.load(t1, base, disp + i64(layout::D_SECRECY), w);
    b.alu_rr(Op::AndRR, t1, c.val);
    b.alu_rr(Op::XorRR, t1, src);
    b.store(base, disp, t1, w);
}

// Fast rules: zero old mask means public, store raw; else fresh nonzero mask.
inline void emit_fast_write(Ctx& c, unsigned base, i64 disp, u8 w, unsigned src,
                            unsigned t1) {
    CodeBuilder& b = c.b;
    auto pub = b.new_label();
    auto end = b.new_label();
    b.load(t1, base, disp + i64(layout::D_MASK), w);
    b.alu_rr(Op::AndRR, t1, t1);
    b.branch(Op::Jz, pub);
    emit_draw_nonzero(c, w);
    b.store(base, disp + i64(layout::D_MASK), c.val, w);
    b.mov_rr(t1, src);
    b.alu_rr(Op::XorRR, t1, c.val);
    b.store(base, disp, t1, w);
    b.branch(Op::Jmp, end);
    b.bind(pub);
    b.store(base, disp, src, w);
    b.bind(end);
}

// Enhanced sub-word write: update the 4-byte aligned window containing the
// byte. A 2-byte store runs this twice, once per byte, so a straddled window
// boundary is handled naturally.
inline void emit_enhanced_byte_write(Ctx& c, unsigned base, i64 disp, unsigned src,
                                     unsigned src_byte, unsigned t1, unsigned t2,
                                     unsigned t3) {
    CodeBuilder& b = c.b;
    const unsigned X = c.aux, V = c.val;

    b.mov_rr(t1, base);
    b.mov_ri(X, u64(disp + i64(src_byte)));
    b.alu_rr(Op::AddRR, t1, X); // byte address
    b.mov_rr(t2, t1);
    b.alu_ri(Op::AndRI, t1, i8(-4)); // window base
    b.alu_rr(Op::SubRR, t2, t1);
    b.shift_ri(Op::ShlRI, t2, 3); // bit offset within the window

    // decode the window with its per-byte secrecy
    b.load(t3, t1, i64(layout::D_MASK), 4);
    if (c.opts.variant != Variant::Fast) {
        b.load(X, t1, i64(layout::D_SECRECY), 4);
        b.alu_rr(Op::AndRR, t3, X);
    }
    b.load(X, t1, 0, 4);
    b.alu_rr(Op::XorRR, t3, X);

    // splice the new byte
    b.mov_ri(X, 0xff);
    b.alu_rr(Op::ShlRR, X, t2);
    b.alu_ri(Op::XorRI, X, i8(-1)); // ~(0xff << k)
    b.alu_rr(Op::AndRR, t3, X);
    b.mov_ri(V, 0xff);
    b.mov_rr(X, src);
    if (src_byte)
        b.shift_ri(Op::ShrRI, X, 8 * src_byte);
    b.alu_rr(Op::AndRR, X, V);
    b.alu_rr(Op::ShlRR, X, t2);
    b.alu_rr(Op::OrRR, t3, X);

    // fresh 32-bit mask over the whole window, then re-encode
    if (c.opts.variant == Variant::Fast) {
        emit_draw_nonzero(c, 4);
        b.store(t1, i64(layout::D_MASK), V, 4);
        b.alu_rr(Op::XorRR, t3, V);
    } else {
        emit_draw(c);
        b.store(t1, i64(layout::D_MASK), V, 4);
        b.load(X, t1, i64(layout::D_SECRECY), 4);
        b.alu_rr(Op::AndRR, V, X);
        b.alu_rr(Op::XorRR, t3, V);
    }
    b.store(t1, 0, t3, 4);
}

// Variant dispatch for a full write of `src` to [base+disp].
inline void emit_write(Ctx& c, Seq& s, unsigned base, i64 disp, u8 w, unsigned src) {
    switch (c.opts.variant) {
    case Variant::Base:
        emit_base_write(c, base, disp, w, src, s.acquire());
        break;
    case Variant::Fast:
        emit_fast_write(c, base, disp, w, src, s.acquire());
        break;
    case Variant::Enhanced:
        if (w >= 4) {
            emit_base_write(c, base, disp, w, src, s.acquire());
        } else {
            unsigned t1 = s.acquire(), t2 = s.acquire(), t3 = s.acquire();
            for (unsigned k = 0; k < w; ++k)
                emit_enhanced_byte_write(c, base, disp, src, k, t1, t2, t3);
        }
        break;
    }
}

// --- Replaced-instruction sequences ------------------------------------------

inline bool maskable_op(Op op) {
    return op == Op::Load || op == Op::Store || is_mem_rmw(op) || op == Op::Push ||
           op == Op::Pop || op == Op::Copyn;
}

// Emits the masked replacement for one instruction. Markers are emitted by
// the caller.
inline void emit_masked_instruction(Ctx& c, const Instruction& in, u64 off) {
    CodeBuilder& b = c.b;
    bool rmw = is_mem_rmw(in.op);
    bool flags_needed = rmw ? false : c.rep.liveness.flags_live(off);
    Seq s(c, off, operand_mask(in), flags_needed);

    switch (in.op) {
    case Op::Load: {
        unsigned t1 = s.acquire();
        if (in.rd != in.mem.base && in.rd != c.anchor) {
            emit_decode_read(c, in.mem.base, in.mem.disp, in.mem.width, in.rd, t1);
        } else {
            unsigned t2 = s.acquire();
            emit_decode_read(c, in.mem.base, in.mem.disp, in.mem.width, t2, t1);
            b.mov_rr(in.rd, t2);
        }
        break;
    }
    case Op::Store:
        emit_write(c, s, in.mem.base, in.mem.disp, in.mem.width, in.rd);
        break;
    case Op::MAdd: case Op::MSub: case Op::MXor: case Op::MAnd: case Op::MOr:
    case Op::MShl: case Op::MShr: {
        unsigned t1 = s.acquire();
        unsigned t2 = s.acquire();
        emit_decode_read(c, in.mem.base, in.mem.disp, in.mem.width, t2, t1);
        if (in.op == Op::MShl || in.op == Op::MShr) {
            b.shift_ri(in.op == Op::MShl ? Op::ShlRI : Op::ShrRI, t2, in.aux);
        } else {
            b.mov_rr(t1, in.rd);
            emit_truncate(c, t1, in.mem.width);
            Op reg_op = in.op == Op::MAdd   ? Op::AddRR
                        : in.op == Op::MSub ? Op::SubRR
                        : in.op == Op::MXor ? Op::XorRR
                        : in.op == Op::MAnd ? Op::AndRR
                                            : Op::OrRR;
            b.alu_rr(reg_op, t2, t1);
        }
        if (c.rep.liveness.flags_live(off))
            s.capture_flags();
        // re-encode the result
        switch (c.opts.variant) {
        case Variant::Base:
            emit_base_write(c, in.mem.base, in.mem.disp, in.mem.width, t2, t1);
            break;
        case Variant::Fast:
            emit_fast_write(c, in.mem.base, in.mem.disp, in.mem.width, t2, t1);
            break;
        case Variant::Enhanced:
            if (in.mem.width >= 4) {
                emit_base_write(c, in.mem.base, in.mem.disp, in.mem.width, t2, t1);
            } else {
                unsigned t3 = s.acquire(), t4 = s.acquire();
                for (unsigned k = 0; k < in.mem.width; ++k)
                    emit_enhanced_byte_write(c, in.mem.base, in.mem.disp, t2, k, t1, t3, t4);
            }
            break;
        }
        break;
    }
    case Op::Push:
        emit_write(c, s, SP, -8, 8, in.rs);
        b.alu_ri(Op::SubRI, SP, 8);
        break;
    case Op::Pop: {
        unsigned t1 = s.acquire();
        if (in.rd == SP)
            throw RewriteError("pop into the stack pointer", {off});
        if (in.rd != c.anchor) {
            emit_decode_read(c, SP, 0, 8, in.rd, t1);
        } else {
            unsigned t2 = s.acquire();
            emit_decode_read(c, SP, 0, 8, t2, t1);
            b.mov_rr(in.rd, t2);
        }
        b.alu_ri(Op::AddRI, SP, 8);
        break;
    }
    case Op::Copyn: {
        // explicit word loop: decode each source word per its secrecy,
        // re-encode for the destination
        unsigned td = s.acquire(), ts = s.acquire(), tn = s.acquire();
        unsigned tp = s.acquire(), t1 = s.acquire();
        b.mov_rr(td, in.rd);
        b.mov_rr(ts, in.rs);
        b.mov_rr(tn, in.aux & 0xf);
        auto loop = b.new_label();
        auto end = b.new_label();
        b.bind(loop);
        b.alu_rr(Op::AndRR, tn, tn);
        b.branch(Op::Jz, end);
        emit_decode_read(c, ts, 0, 8, tp, t1);
        switch (c.opts.variant) {
        case Variant::Fast:
            emit_fast_write(c, td, 0, 8, tp, t1);
            break;
        default:
            emit_base_write(c, td, 0, 8, tp, t1);
            break;
        }
        b.alu_ri(Op::AddRI, ts, 8);
        b.alu_ri(Op::AddRI, td, 8);
        b.alu_ri(Op::SubRI, tn, 1);
        b.branch(Op::Jmp, loop);
        b.bind(end);
        break;
    }
    default:
        throw RewriteError(strf("cannot instrument opcode '", op_name(in.op), "'"), {off});
    }
    s.close();
}

// --- Frame gadget --------------------------------------------------------

// Initializes the shadow planes for a function's whole frame extent at
// entry: secret offsets get fresh masks (and secrecy 0xff), everything else
// is reset to public.
inline void emit_frame_gadget(Ctx& c, const FrameLayout& fl, u64 entry_off) {
    if (fl.frame_size == 0)
        return;
    CodeBuilder& b = c.b;
    u64 ext = layout::align_up(fl.frame_size, 8);
    Seq s(c, entry_off, 0, c.rep.liveness.flags_live_before(entry_off),
          Seq::Mode::Before);
    unsigned t1 = s.acquire();
    b.mov_rr(t1, SP);
    b.mov_ri(c.aux, ext);
    b.alu_rr(Op::SubRR, t1, c.aux); // frame bottom

    for (u64 k = 0; k < ext / 8; ++k) {
        u64 chunk_lo = ext - 8 * k; // delta of the chunk's lowest byte
        u64 pattern = 0;
        for (unsigned i = 0; i < 8; ++i) {
            u64 delta = chunk_lo - i;
            if (delta >= 1 && fl.secret_deltas.count(delta))
                pattern |= u64(0xff) << (8 * i);
        }
        i64 disp = i64(8 * k);
        if (pattern != 0) {
            if (c.opts.variant == Variant::Fast) {
                auto again = b.new_label();
                b.bind(again);
                emit_draw(c);
                b.mov_ri(c.aux, pattern);
                b.alu_rr(Op::AndRR, c.val, c.aux);
                b.branch(Op::Jz, again);
                b.store(t1, disp + i64(layout::D_MASK), c.val, 8);
            } else {
                emit_draw(c);
                b.store(t1, disp + i64(layout::D_MASK), c.val, 8);
                b.mov_ri(c.aux, pattern);
                b.store(t1, disp + i64(layout::D_SECRECY), c.aux, 8);
            }
        } else {
            b.mov_ri(c.val, 0);
            if (c.opts.variant == Variant::Fast)
                b.store(t1, disp + i64(layout::D_MASK), c.val, 8);
            else
                b.store(t1, disp + i64(layout::D_SECRECY), c.val, 8);
        }
    }
    s.close();
}

// --- Allocation machinery --------------------------------------------------

inline void emit_tracker_shift(Ctx& c, u64 site, u16 operands, bool flagged, bool pre) {
    CodeBuilder& b = c.b;
    bool flags = pre ? c.rep.liveness.flags_live_before(site)
                     : c.rep.liveness.flags_live(site);
    Seq s(c, site, operands, flags, pre ? Seq::Mode::Before : Seq::Mode::After);
    unsigned t = s.acquire();
    b.load(t, c.anchor, i64(layout::TRACKER_ADDR), 8);
    if (pre) {
        b.shift_ri(Op::ShlRI, t, 1);
        if (flagged)
            b.alu_ri(Op::AddRI, t, 1);
    } else {
        b.shift_ri(Op::ShrRI, t, 1);
    }
    b.store(c.anchor, i64(layout::TRACKER_ADDR), t, 8);
    s.close();
}

// After `alloc rd, rs`: decide secrecy from the tracker (all-ones pattern)
// and initialize the object's mask and secrecy planes.
inline void emit_alloc_handler(Ctx& c, const Instruction& in, u64 site) {
    CodeBuilder& b = c.b;
    Seq s(c, site, operand_mask(in), c.rep.liveness.flags_live(site), Seq::Mode::After);
    unsigned t1 = s.acquire(), t2 = s.acquire(), t3 = s.acquire();
    auto pub = b.new_label();
    auto sloop = b.new_label();
    auto ploop = b.new_label();
    auto end = b.new_label();

    Instruction msz;
    msz.op = Op::Msize;
    msz.rd = u8(t2);
    msz.rs = in.rd;
    b.emit(msz);
    b.mov_rr(t3, in.rd);       // cursor
    b.alu_rr(Op::AddRR, t2, t3); // end

    b.load(t1, c.anchor, i64(layout::TRACKER_ADDR), 8);
    b.alu_rr(Op::AndRR, t1, t1);
    b.branch(Op::Jz, pub);
    b.mov_rr(c.aux, t1);
    b.alu_ri(Op::AddRI, c.aux, 1);
    b.alu_rr(Op::AndRR, c.aux, t1);
    b.branch(Op::Jnz, pub); // tracker & (tracker+1) != 0: not all ones

    b.bind(sloop);
    b.alu_rr(Op::CmpRR, t3, t2);
    b.branch(Op::Jz, end);
    if (c.opts.variant == Variant::Fast) {
        emit_draw_nonzero(c, 8);
        b.store(t3, i64(layout::D_MASK), c.val, 8);
    } else {
        emit_draw(c);
        b.store(t3, i64(layout::D_MASK), c.val, 8);
        b.mov_ri(c.aux, ~u64(0));
        b.store(t3, i64(layout::D_SECRECY), c.aux, 8);
    }
    b.alu_ri(Op::AddRI, t3, 8);
    b.branch(Op::Jmp, sloop);

    b.bind(pub);
    b.bind(ploop);
    b.alu_rr(Op::CmpRR, t3, t2);
    b.branch(Op::Jz, end);
    b.mov_ri(c.val, 0);
    b.store(t3, i64(layout::D_MASK), c.val, 8);
    if (c.opts.variant != Variant::Fast)
        b.store(t3, i64(layout::D_SECRECY), c.val, 8);
    b.alu_ri(Op::AddRI, t3, 8);
    b.branch(Op::Jmp, ploop);

    b.bind(end);
    s.close();
}

// Before `realloc rd, rs`: stage the old object's data and keystream so the
// contents survive the move without the plaintext ever hitting memory.
inline void emit_realloc_stage(Ctx& c, const Instruction& in, u64 site) {
    CodeBuilder& b = c.b;
    Seq s(c, site, operand_mask(in), c.rep.liveness.flags_live_before(site),
          Seq::Mode::Before);
    unsigned t1 = s.acquire(), t2 = s.acquire(), t3 = s.acquire();
    auto skip = b.new_label();
    auto loop = b.new_label();

    b.mov_ri(c.val, 0);
    b.store(c.anchor, i64(RSIZE_SLOT), c.val, 8);
    b.mov_rr(t1, in.rd);
    b.alu_rr(Op::AndRR, t1, t1);
    b.branch(Op::Jz, skip); // realloc(0, n) behaves like alloc

    Instruction msz;
    msz.op = Op::Msize;
    msz.rd = u8(t1);
    msz.rs = in.rd;
    b.emit(msz);
    b.store(c.anchor, i64(RSIZE_SLOT), t1, 8);
    b.mov_rr(t2, in.rd); // source cursor
    b.alu_rr(Op::AddRR, t1, t2); // source end
    b.mov_ri(t3, layout::STAGING_BASE);

    b.bind(loop);
    b.alu_rr(Op::CmpRR, t2, t1);
    b.branch(Op::Jz, skip);
    b.load(c.val, t2, 0, 8);
    b.store(t3, 0, c.val, 8);
    b.load(c.val, t2, i64(layout::D_MASK), 8);
    if (c.opts.variant != Variant::Fast) {
        b.load(c.aux, t2, i64(layout::D_SECRECY), 8);
        b.alu_rr(Op::AndRR, c.val, c.aux);
    }
    b.store(t3, i64(layout::D_MASK), c.val, 8);
    b.alu_ri(Op::AddRI, t2, 8);
    b.alu_ri(Op::AddRI, t3, 8);
    b.branch(Op::Jmp, loop);

    b.bind(skip);
    s.close();
}

// After `realloc rd, rs`: restore staged contents at the new address with
// the secrecy the tracker dictates, then extend with encoded zeros.
inline void emit_realloc_restore(Ctx& c, const Instruction& in, u64 site) {
    CodeBuilder& b = c.b;
    Seq s(c, site, operand_mask(in), c.rep.liveness.flags_live(site), Seq::Mode::After);
    unsigned t1 = s.acquire(), t2 = s.acquire(), t3 = s.acquire(), t4 = s.acquire();

    Instruction msz;
    msz.op = Op::Msize;
    msz.rd = u8(t1);
    msz.rs = in.rd;
    b.emit(msz);
    b.mov_rr(t2, in.rd);       // cursor
    b.mov_rr(t4, t1);          // new size
    b.alu_rr(Op::AddRR, t1, t2); // new end

    // t3 = cursor bound for the staged part: rd + min(old, new)
    b.load(t3, c.anchor, i64(RSIZE_SLOT), 8); // old size
    b.mov_rr(c.val, t3);
    b.alu_rr(Op::SubRR, c.val, t4);
    b.shift_ri(Op::ShrRI, c.val, 63); // 1 iff old < new
    b.mov_ri(c.aux, 0);
    b.alu_rr(Op::SubRR, c.aux, c.val); // all-ones iff old < new
    b.alu_rr(Op::AndRR, t3, c.aux);    // old & m
    b.alu_ri(Op::XorRI, c.aux, i8(-1));
    b.alu_rr(Op::AndRR, t4, c.aux); // new & ~m
    b.alu_rr(Op::OrRR, t3, t4);     // min(old, new)
    b.alu_rr(Op::AddRR, t3, t2);    // staged end
    b.mov_ri(t4, layout::STAGING_BASE);

    auto pub = b.new_label();
    auto s1 = b.new_label(), s2h = b.new_label(), s2 = b.new_label();
    auto p1 = b.new_label(), p2h = b.new_label(), p2 = b.new_label();
    auto end = b.new_label();

    b.load(c.val, c.anchor, i64(layout::TRACKER_ADDR), 8);
    b.alu_rr(Op::AndRR, c.val, c.val);
    b.branch(Op::Jz, pub);
    b.mov_rr(c.aux, c.val);
    b.alu_ri(Op::AddRI, c.aux, 1);
    b.alu_rr(Op::AndRR, c.aux, c.val);
    b.branch(Op::Jnz, pub);

    // secret: re-encode the staged plaintext with fresh masks
    b.bind(s1);
    b.alu_rr(Op::CmpRR, t2, t3);
    b.branch(Op::Jz, s2h);
    if (c.opts.variant != Variant::Fast) {
        b.mov_ri(c.aux, ~u64(0));
        b.store(t2, i64(layout::D_SECRECY), c.aux, 8);
        emit_draw(c);
    } else {
        emit_draw_nonzero(c, 8);
    }
    b.store(t2, i64(layout::D_MASK), c.val, 8);
    b.load(c.aux, t4, 0, 8);
    b.alu_rr(Op::XorRR, c.val, c.aux);
    b.load(c.aux, t4, i64(layout::D_MASK), 8);
    b.alu_rr(Op::XorRR, c.val, c.aux); // M' ^ staged_data ^ keystream = M' ^ P
    b.store(t2, 0, c.val, 8);
    b.alu_ri(Op::AddRI, t2, 8);
    b.alu_ri(Op::AddRI, t4, 8);
    b.branch(Op::Jmp, s1);

    // secret tail: encode zeros over the grown extent
    b.bind(s2h);
    b.bind(s2);
    b.alu_rr(Op::CmpRR, t2, t1);
    b.branch(Op::Jz, end);
    if (c.opts.variant != Variant::Fast) {
        b.mov_ri(c.aux, ~u64(0));
        b.store(t2, i64(layout::D_SECRECY), c.aux, 8);
        emit_draw(c);
    } else {
        emit_draw_nonzero(c, 8);
    }
    b.store(t2, i64(layout::D_MASK), c.val, 8);
    b.store(t2, 0, c.val, 8); // encode(0) = mask
    b.alu_ri(Op::AddRI, t2, 8);
    b.branch(Op::Jmp, s2);

    // public: restore raw, zero the planes
    b.bind(pub);
    b.bind(p1);
    b.alu_rr(Op::CmpRR, t2, t3);
    b.branch(Op::Jz, p2h);
    b.load(c.val, t4, 0, 8);
    b.load(c.aux, t4, i64(layout::D_MASK), 8);
    b.alu_rr(Op::XorRR, c.val, c.aux);
    b.store(t2, 0, c.val, 8);
    b.mov_ri(c.aux, 0);
    b.store(t2, i64(layout::D_MASK), c.aux, 8);
    if (c.opts.variant != Variant::Fast)
        b.store(t2, i64(layout::D_SECRECY), c.aux, 8);
    b.alu_ri(Op::AddRI, t2, 8);
    b.alu_ri(Op::AddRI, t4, 8);
    b.branch(Op::Jmp, p1);

    b.bind(p2h);
    b.bind(p2);
    b.alu_rr(Op::CmpRR, t2, t1);
    b.branch(Op::Jz, end);
    b.mov_ri(c.val, 0);
    b.store(t2, 0, c.val, 8);
    b.store(t2, i64(layout::D_MASK), c.val, 8);
    if (c.opts.variant != Variant::Fast)
        b.store(t2, i64(layout::D_SECRECY), c.val, 8);
    b.alu_ri(Op::AddRI, t2, 8);
    b.branch(Op::Jmp, p2);

    b.bind(end);
    s.close();
}

// classify: mark [addr, addr+len) secret at runtime and re-encode the
// existing contents; declassify: decode to plaintext and clear the planes.
// Both require 4-byte aligned ranges (runtime-asserted with a break trap).
inline void emit_classify_handler(Ctx& c, const Instruction& in, u64 site, bool classify) {
    CodeBuilder& b = c.b;
    Seq s(c, site, operand_mask(in), c.rep.liveness.flags_live(site), Seq::Mode::After);
    unsigned t1 = s.acquire(), t2 = s.acquire(), t3 = s.acquire();
    auto ok = b.new_label();
    auto loop = b.new_label();
    auto end = b.new_label();

    b.mov_rr(c.aux, in.rd);
    b.alu_rr(Op::OrRR, c.aux, in.rs);
    b.alu_ri(Op::AndRI, c.aux, 3);
    b.branch(Op::Jz, ok);
    Instruction trap;
    trap.op = Op::Break;
    b.emit(trap); // unaligned classify range: deliberate trap
    b.bind(ok);

    b.mov_rr(t1, in.rd);
    b.mov_rr(t2, in.rd);
    b.alu_rr(Op::AddRR, t2, in.rs);

    b.bind(loop);
    b.alu_rr(Op::CmpRR, t1, t2);
    b.branch(Op::Jz, end);
    b.load(t3, t1, i64(layout::D_MASK), 4);
    if (c.opts.variant != Variant::Fast) {
        b.load(c.aux, t1, i64(layout::D_SECRECY), 4);
        b.alu_rr(Op::AndRR, t3, c.aux); // old keystream
    }
    if (classify) {
        if (c.opts.variant != Variant::Fast) {
            b.mov_ri(c.aux, 0xffffffffULL);
            b.store(t1, i64(layout::D_SECRECY), c.aux, 4);
            emit_draw(c);
        } else {
            emit_draw_nonzero(c, 4);
        }
        b.store(t1, i64(layout::D_MASK), c.val, 4);
        b.alu_rr(Op::XorRR, c.val, t3);
        b.load(c.aux, t1, 0, 4);
        b.alu_rr(Op::XorRR, c.val, c.aux); // M' ^ P
        b.store(t1, 0, c.val, 4);
    } else {
        b.load(c.aux, t1, 0, 4);
        b.alu_rr(Op::XorRR, c.aux, t3);
        b.store(t1, 0, c.aux, 4); // plaintext, now public by intent
        b.mov_ri(c.val, 0);
        b.store(t1, i64(layout::D_MASK), c.val, 4);
        if (c.opts.variant != Variant::Fast)
            b.store(t1, i64(layout::D_SECRECY), c.val, 4);
    }
    b.alu_ri(Op::AddRI, t1, 4);
    b.branch(Op::Jmp, loop);
    b.bind(end);
    s.close();
}

inline void emit_reseed(Ctx& c, u64 site) {
    if (c.opts.prng != PrngKind::Xs128p && c.opts.prng != PrngKind::AesRound)
        return;
    CodeBuilder& b = c.b;
    Seq s(c, site, 0, c.rep.liveness.flags_live(site), Seq::Mode::After);
    auto fresh = [&](u64 slot) {
        Instruction r;
        r.op = Op::Rand;
        r.rd = u8(c.val);
        b.emit(r);
        b.store(c.anchor, i64(slot), c.val, 8);
    };
    if (c.opts.prng == PrngKind::Xs128p) {
        fresh(layout::PRNG_XS_S0);
        fresh(layout::PRNG_XS_S1);
    } else {
        fresh(layout::PRNG_AES_STATE);
        fresh(layout::PRNG_AES_STATE + 8);
        fresh(layout::PRNG_AES_KEY);
        fresh(layout::PRNG_AES_KEY + 8);
    }
    s.close();
}

// --- Init stub ---------------------------------------------------------------

// Runs before the original entry: sets up the anchor register, seeds the
// PRNG state, clears the allocation tracker, and walks the static
// secret-object list, drawing masks and re-encoding the existing contents.
inline void emit_init_stub(Ctx& c, const std::vector<std::pair<u64, u64>>& secret_statics) {
    CodeBuilder& b = c.b;
    const unsigned A = c.anchor, X = c.aux, V = c.val;
    b.mov_ri(A, 0);
    b.mov_ri(V, 0);
    b.store(A, i64(layout::TRACKER_ADDR), V, 8);

    if (c.opts.prng == PrngKind::Xs128p) {
        PrngState st = prng_seed(PrngKind::Xs128p, c.opts.seed);
        b.mov_ri(V, st.xs.s0);
        b.store(A, i64(layout::PRNG_XS_S0), V, 8);
        b.mov_ri(V, st.xs.s1);
        b.store(A, i64(layout::PRNG_XS_S1), V, 8);
    } else if (c.opts.prng == PrngKind::AesRound) {
        PrngState st = prng_seed(PrngKind::AesRound, c.opts.seed);
        for (unsigned w = 0; w < 2; ++w) {
            b.mov_ri(V, load_le(st.aes_state.data() + 8 * w, 8));
            b.store(A, i64(layout::PRNG_AES_STATE + 8 * w), V, 8);
            b.mov_ri(V, load_le(st.aes_key.data() + 8 * w, 8));
            b.store(A, i64(layout::PRNG_AES_KEY + 8 * w), V, 8);
        }
    }

    // encode static secret objects in place, chunk by chunk
    for (const auto& [base, len] : secret_statics) {
        u64 lo = layout::align_down(base, 8);
        u64 hi = layout::align_up(base + len, 8);
        for (u64 chunk = lo; chunk < hi; chunk += 8) {
            u64 pattern = 0;
            for (unsigned i = 0; i < 8; ++i) {
                u64 a = chunk + i;
                if (a >= base && a < base + len)
                    pattern |= u64(0xff) << (8 * i);
            }
            if (c.opts.variant == Variant::Fast) {
                auto again = b.new_label();
                b.bind(again);
                emit_draw(c);
                b.mov_ri(X, pattern);
                b.alu_rr(Op::AndRR, V, X);
                b.branch(Op::Jz, again);
                b.store(A, i64(chunk + layout::D_MASK), V, 8);
                b.load(X, A, i64(chunk), 8);
                b.alu_rr(Op::XorRR, X, V);
                b.store(A, i64(chunk), X, 8);
            } else {
                emit_draw(c);
                b.store(A, i64(chunk + layout::D_MASK), V, 8);
                b.mov_ri(X, pattern);
                b.store(A, i64(chunk + layout::D_SECRECY), X, 8);
                b.alu_rr(Op::AndRR, V, X);
                b.load(X, A, i64(chunk), 8);
                b.alu_rr(Op::XorRR, X, V);
                b.store(A, i64(chunk), X, 8);
            }
        }
    }

    // leave flags in the power-on state (all clear) and the scratch pair zeroed
    b.mov_ri(X, 1);
    b.alu_rr(Op::AndRR, X, X);
    b.mov_ri(X, 0);
    b.mov_ri(V, 0);
    b.branch_abs(Op::Jmp, c.prog.entry);
}

} // namespace rw

// --- Instrumentation driver --------------------------------------------------

inline Program instrument(const Program& prog, const AnalysisReport& rep,
                          const RewriteOptions& opts) {
    if (prog.hardened)
        throw RewriteError("program is already hardened");
    if (rep.program_hash != prog.hash())
        throw RewriteError("analysis report does not match this program");

    // reserved registers: three registers the program never references
    u16 referenced = 0;
    {
        u64 off = 0;
        while (off < prog.code.size()) {
            auto in = decode(prog.code, off);
            if (!in)
                throw RewriteError(strf("undecodable instruction at ",
                                        hex(prog.code_base + off)));
            RegUse u = reg_use(*in);
            referenced |= u.reads | u.writes;
            if (in->has_mem)
                referenced |= u16(1) << in->mem.base;
            off += encoded_length(in->op);
        }
    }
    rw::Ctx ctx{prog, rep, opts, 14, 12, 13, {}, {}, false, 0};
    {
        std::vector<unsigned> free;
        for (unsigned r = 0; r < 15; ++r) // sp excluded
            if (!(referenced & (u16(1) << r)))
                free.push_back(r);
        if (free.size() < 3)
            throw RewriteError(
                "need three program-wide unused registers for anchor and masks");
        ctx.anchor = free[free.size() - 1];
        ctx.val = free[free.size() - 2];
        ctx.aux = free[free.size() - 3];
    }
    if (opts.prng == PrngKind::Fixed)
        ctx.fixed_mask = opts.seed;

    for (const auto& site : rep.objects.heap_sites)
        if (site.call_stack.size() > 63)
            throw RewriteError("allocation call stack deeper than 63",
                               {site.call_stack.back()});

    // collect instrumentation sites per block
    struct SiteRef {
        u64 offset;
        Instruction in;
        bool masked = false;
    };
    bool secrets_present = false;
    for (const auto& [off, cls] : rep.classes)
        if (cls.cls() != Secrecy::PublicOnly)
            secrets_present = true;
    for (const auto& so : rep.objects.statics)
        secrets_present |= so.secret;
    for (const auto& hs : rep.objects.heap_sites)
        secrets_present |= hs.secret;
    for (const auto& [fn, fl] : rep.objects.frames)
        secrets_present |= !fl.secret_deltas.empty();

    std::vector<u64> unsupported;
    std::map<u64, std::vector<SiteRef>> block_sites; // block start -> sites
    std::set<u64> redirected;
    u32 masked_count = 0;

    auto decode_at = [&](u64 off) -> Instruction {
        u64 rem = 0;
        const u8* cp = prog.code_at(off, &rem);
        if (!cp)
            throw RewriteError(strf("block offset ", hex(off), " outside code"));
        auto in = decode(std::span<const u8>(cp, rem), 0);
        if (!in)
            throw RewriteError(strf("undecodable instruction at ", hex(off)));
        return *in;
    };

    for (const auto& blk : rep.blocks.blocks) {
        bool redirect = false;
        for (u64 off = blk.start; off < blk.end;) {
            Instruction in = decode_at(off);
            SiteRef ref{off, in, false};
            Secrecy cls = rep.instr_class(off);
            if (cls != Secrecy::PublicOnly) {
                if (rw::maskable_op(in.op)) {
                    ref.masked = true;
                    ++masked_count;
                    redirect = true;
                } else if (in.op != Op::Call && in.op != Op::Ret &&
                           in.op != Op::Alloc && in.op != Op::Realloc) {
                    unsupported.push_back(off);
                }
            }
            if (in.op == Op::Call && rep.objects.tracked_calls.count(off))
                redirect = true;
            if ((in.op == Op::Alloc || in.op == Op::Realloc) &&
                rep.objects.tracked_calls.count(off))
                redirect = true;
            if ((in.op == Op::Classify || in.op == Op::Declassify) && secrets_present)
                redirect = true;
            if (in.op == Op::Marker && opts.reseed && (in.aux & 0x7f) == 0 &&
                (in.aux & 0x80))
                redirect = true;
            block_sites[blk.start].push_back(ref);
            off += encoded_length(in.op);
        }
        if (redirect)
            redirected.insert(blk.start);
    }
    if (!unsupported.empty())
        throw RewriteError("unsupported instruction carries a secrecy class",
                           unsupported);
    if (masked_count > 64)
        throw RewriteError(strf("too many instrumented sites (", masked_count,
                                "), marker id space has 64"));

    // function entry blocks receive frame gadgets
    std::set<u64> gadget_funcs;
    if (secrets_present) {
        for (const auto& [fn, fl] : rep.objects.frames) {
            if (fl.frame_size == 0)
                continue;
            gadget_funcs.insert(fn);
            if (block_sites.count(fn))
                redirected.insert(fn);
        }
    }

    PatchPlan plan = plan_trampolines(rep.blocks, redirected);

    // --- emit the instrument section
    u64 instrument_base =
        layout::align_up(prog.code_base + prog.code.size(), 0x100);
    ctx.b = CodeBuilder{};

    std::vector<std::pair<u64, u64>> secret_statics;
    for (const auto& so : rep.objects.statics)
        if (so.secret)
            secret_statics.emplace_back(so.base, so.len);

    rw::emit_init_stub(ctx, secret_statics);
    if (opts.prng == PrngKind::AesRound)
        rw::emit_aes_routine(ctx);

    std::map<u64, u64> block_target; // original start -> instrument address
    u8 next_marker = 64;             // site markers live above the user range
    std::vector<std::pair<u64, u8>> site_map;

    for (const auto& blk : rep.blocks.blocks) {
        if (!redirected.count(blk.start))
            continue;
        block_target[blk.start] = instrument_base + ctx.b.size();
        if (gadget_funcs.count(blk.start))
            rw::emit_frame_gadget(ctx, rep.objects.frames.at(blk.start), blk.start);

        Instruction last{};
        for (const SiteRef& ref : block_sites[blk.start]) {
            const Instruction& in = ref.in;
            last = in;
            if (ref.masked) {
                site_map.emplace_back(ref.offset, next_marker);
                ctx.b.marker(next_marker, true);
                rw::emit_masked_instruction(ctx, in, ref.offset);
                ctx.b.marker(next_marker, false);
                ++next_marker;
                continue;
            }
            u16 operands = rw::operand_mask(in);
            bool tracked = rep.objects.tracked_calls.count(ref.offset) != 0;
            bool flagged = rep.objects.flagged_calls.count(ref.offset) != 0;
            switch (in.op) {
            case Op::Call:
                if (tracked)
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, true);
                ctx.b.branch_abs(Op::Call, branch_target(in, ref.offset));
                if (tracked)
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, false);
                break;
            case Op::Alloc:
                if (tracked) {
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, true);
                    ctx.b.emit(in);
                    rw::emit_alloc_handler(ctx, in, ref.offset);
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, false);
                } else {
                    ctx.b.emit(in);
                }
                break;
            case Op::Realloc:
                if (tracked) {
                    rw::emit_realloc_stage(ctx, in, ref.offset);
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, true);
                    ctx.b.emit(in);
                    rw::emit_realloc_restore(ctx, in, ref.offset);
                    rw::emit_tracker_shift(ctx, ref.offset, operands, flagged, false);
                } else {
                    ctx.b.emit(in);
                }
                break;
            case Op::Classify:
            case Op::Declassify:
                ctx.b.emit(in);
                if (secrets_present)
                    rw::emit_classify_handler(ctx, in, ref.offset,
                                              in.op == Op::Classify);
                break;
            case Op::Marker:
                ctx.b.emit(in);
                if (opts.reseed && (in.aux & 0x7f) == 0 && (in.aux & 0x80))
                    rw::emit_reseed(ctx, ref.offset);
                break;
            case Op::Jmp: case Op::Jmps:
                ctx.b.branch_abs(Op::Jmp, branch_target(in, ref.offset));
                break;
            case Op::Jz: case Op::Jzs:
                ctx.b.branch_abs(Op::Jz, branch_target(in, ref.offset));
                break;
            case Op::Jnz: case Op::Jnzs:
                ctx.b.branch_abs(Op::Jnz, branch_target(in, ref.offset));
                break;
            default:
                ctx.b.emit(in);
                break;
            }
        }
        // fall through back to the original stream unless the block ended the
        // control flow itself
        if (!(last.op == Op::Jmp || last.op == Op::Jmps || last.op == Op::Ret ||
              last.op == Op::Halt || last.op == Op::Break))
            ctx.b.branch_abs(Op::Jmp, blk.end);
    }

    // --- assemble the hardened container
    Program out = prog;
    out.hardened = true;
    out.instrument_base = instrument_base;
    out.instrument = ctx.b.finalize(instrument_base);
    out.entry = instrument_base; // init stub first
    out.meta.variant = opts.variant;
    out.meta.prng = opts.prng;
    out.meta.reseed = opts.reseed;
    out.meta.anchor_reg = u8(ctx.anchor);
    out.meta.aux_reg = u8(ctx.aux);
    out.meta.val_reg = u8(ctx.val);
    out.meta.seed = opts.seed;
    out.meta.original_hash = prog.hash();
    out.meta.site_count = masked_count;
    out.secrets = secret_statics;
    out.site_map = std::move(site_map);

    if (instrument_base + out.instrument.size() > layout::CODE_LIMIT)
        throw RewriteError("instrument section exceeds the code region");

    // patch redirected block heads
    for (const auto& [start, patch] : plan.entries) {
        u64 idx = start - prog.code_base;
        u64 target = block_target.at(start);
        switch (patch.kind) {
        case PatchKind::NearJump: {
            Instruction j;
            j.op = Op::Jmp;
            j.imm = i64(target) - i64(start + 5);
            Bytes e = encode(j);
            std::copy(e.begin(), e.end(), out.code.begin() + idx);
            break;
        }
        case PatchKind::ShortHop: {
            Instruction sj;
            sj.op = Op::Jmps;
            sj.imm = i64(patch.hop_slot) - i64(start + 2);
            Bytes e = encode(sj);
            std::copy(e.begin(), e.end(), out.code.begin() + idx);
            Instruction nj;
            nj.op = Op::Jmp;
            nj.imm = i64(target) - i64(patch.hop_slot + 5);
            Bytes h = encode(nj);
            std::copy(h.begin(), h.end(),
                      out.code.begin() + (patch.hop_slot - prog.code_base));
            break;
        }
        case PatchKind::BreakTrap:
            out.code[idx] = u8(Op::Break);
            out.dispatch[start] = target;
            break;
        }
    }

    // embedded data: AES round tables; spill-slab secrecy preset
    if (opts.prng == PrngKind::AesRound) {
        Bytes tables(4096);
        const auto& te = aes::tables();
        for (unsigned t = 0; t < 4; ++t)
            for (unsigned i = 0; i < 256; ++i)
                store_le(tables.data() + 1024 * t + 4 * i, te[t][i], 4);
        out.statics.emplace_back(layout::AES_TABLE_BASE, std::move(tables));
    }
    if (opts.variant != Variant::Fast)
        out.statics.emplace_back(layout::SPILL_BASE + layout::D_SECRECY,
                                 Bytes(16 * 8, 0xff));

    // regions the loader must map: shadow planes for statics, stack and the
    // instrument data area (the heap's shadows follow the break)
    auto premap_with_shadow = [&](u64 base, u64 len) {
        out.premap.emplace_back(base + layout::D_MASK, len);
        out.premap.emplace_back(base + layout::D_SECRECY, len);
    };
    premap_with_shadow(layout::STATIC_BASE, layout::STATIC_LIMIT - layout::STATIC_BASE);
    premap_with_shadow(layout::STACK_BASE, layout::STACK_TOP - layout::STACK_BASE);
    out.premap.emplace_back(layout::INSTR_DATA_BASE,
                            layout::INSTR_DATA_LIMIT - layout::INSTR_DATA_BASE);
    premap_with_shadow(layout::INSTR_DATA_BASE,
                       layout::INSTR_DATA_LIMIT - layout::INSTR_DATA_BASE);
    return out;
}

} // namespace cb
