#pragma once

#include "interpreter.hpp"

#include <set>
#include <unordered_map>
#include <unordered_set>

// Byte-level dynamic taint tracking driven by interpreter hooks. Boolean
// single-color labels; propagation overtaints rather than undertaints
// (xor r,r does not clear, ALU results are uniformly tainted by any source
// byte). Tainted address registers reject the run: the targets are expected
// to be constant-time, and surfacing a violation beats guessing.

namespace cb {

struct ShadowState {
    std::unordered_set<u64> mem;   // tainted byte addresses
    std::array<u8, 16> regs{};     // per-register byte masks
    bool flags = false;

    bool mem_byte(u64 addr) const { return mem.count(addr) != 0; }
    void set_mem(u64 addr, u64 len, bool t) {
        for (u64 i = 0; i < len; ++i) {
            if (t)
                mem.insert(addr + i);
            else
                mem.erase(addr + i);
        }
    }
    u8 mem_mask(u64 addr, unsigned width) const {
        u8 m = 0;
        for (unsigned i = 0; i < width; ++i)
            if (mem_byte(addr + i))
                m |= u8(1) << i;
        return m;
    }
    void set_mem_mask(u64 addr, unsigned width, u8 mask) {
        for (unsigned i = 0; i < width; ++i) {
            if (mask & (u8(1) << i))
                mem.insert(addr + i);
            else
                mem.erase(addr + i);
        }
    }
    bool reg_any(unsigned r) const { return regs[r] != 0; }
};

inline u8 width_mask(unsigned w) { return w >= 8 ? u8(0xff) : u8((1u << w) - 1); }

struct TaintAbort {
    u64 offset;
    std::string reason;
};

// One memory access as seen by the taint run. `taint_mask` is per byte:
// loaded-byte labels for reads, written-value labels for writes.
struct AccessRecord {
    u64 offset = 0;
    u64 addr = 0;
    u8 width = 0;
    bool is_write = false;
    bool structural = false; // call/ret stack traffic; never an instrumentation site
    u8 taint_mask = 0;
};

enum class Secrecy : u8 { PublicOnly = 0, SecretOnly = 1, Mixed = 2 };

inline const char* secrecy_name(Secrecy s) {
    switch (s) {
    case Secrecy::PublicOnly: return "public";
    case Secrecy::SecretOnly: return "secret";
    case Secrecy::Mixed: return "mixed";
    }
    return "?";
}

struct InstrClass {
    u64 secret_accesses = 0;
    u64 public_accesses = 0;
    bool reads_secret = false;
    bool writes_secret = false;

    Secrecy cls() const {
        if (secret_accesses == 0)
            return Secrecy::PublicOnly;
        return public_accesses == 0 ? Secrecy::SecretOnly : Secrecy::Mixed;
    }
    void join(const InstrClass& o) {
        secret_accesses += o.secret_accesses;
        public_accesses += o.public_accesses;
        reads_secret |= o.reads_secret;
        writes_secret |= o.writes_secret;
    }
};

using ClassTable = std::map<u64, InstrClass>;

inline Secrecy class_of(const ClassTable& t, u64 offset) {
    auto it = t.find(offset);
    return it == t.end() ? Secrecy::PublicOnly : it->second.cls();
}

struct TaintSources {
    std::set<unsigned> secret_inputs;
};

class TaintEngine {
public:
    TaintEngine(const TaintSources& sources, const std::vector<Bytes>& inputs) {
        for (unsigned idx : sources.secret_inputs) {
            if (idx >= inputs.size())
                continue;
            shadow_.set_mem(layout::INPUT_BASE + idx * layout::INPUT_STRIDE,
                            inputs[idx].size(), true);
        }
    }

    ShadowState& shadow() { return shadow_; }
    const std::vector<AccessRecord>& accesses() const { return accesses_; }
    const std::vector<std::string>& warnings() const { return warnings_; }

    void pre(const Instruction& in, u64 off, const MachineState& st) {
        ShadowState& sh = shadow_;
        auto any = [&](unsigned r) { return sh.regs[r] != 0; };
        auto uniform = [&](bool t) { return t ? u8(0xff) : u8(0); };
        auto check_addr_reg = [&](unsigned r, const char* what) {
            if (any(r))
                throw TaintAbort{off, strf("tainted ", what, " register r", r)};
        };
        auto record = [&](u64 addr, unsigned width, bool is_write, u8 mask,
                          bool structural = false) {
            accesses_.push_back({off, addr, u8(width), is_write, structural, mask});
        };
        auto mem_addr = [&] { return st.regs[in.mem.base] + u64(i64(in.mem.disp)); };

        switch (in.op) {
        case Op::MovImm:
            sh.regs[in.rd] = 0;
            break;
        case Op::MovRR:
            sh.regs[in.rd] = sh.regs[in.rs];
            break;
        case Op::AddRR: case Op::SubRR: case Op::XorRR:
        case Op::AndRR: case Op::OrRR: case Op::ShlRR: case Op::ShrRR: {
            bool t = any(in.rd) || any(in.rs);
            sh.regs[in.rd] = uniform(t);
            sh.flags = t;
            break;
        }
        case Op::AddRI: case Op::SubRI: case Op::XorRI:
        case Op::AndRI: case Op::OrRI: case Op::ShlRI: case Op::ShrRI: {
            bool t = any(in.rd);
            sh.regs[in.rd] = uniform(t);
            sh.flags = t;
            break;
        }
        case Op::CmpRR:
            sh.flags = any(in.rd) || any(in.rs);
            break;
        case Op::CmpRI:
            sh.flags = any(in.rd);
            break;
        case Op::Cmovz: case Op::Cmovnz:
            sh.regs[in.rd] = u8(sh.regs[in.rd] | sh.regs[in.rs] | uniform(sh.flags));
            break;
        case Op::Jz: case Op::Jnz: case Op::Jzs: case Op::Jnzs:
            if (sh.flags)
                throw TaintAbort{off, "conditional branch on tainted flags"};
            break;
        case Op::Push: {
            check_addr_reg(SP, "stack pointer");
            u64 a = st.regs[SP] - 8;
            sh.set_mem_mask(a, 8, sh.regs[in.rs]);
            record(a, 8, true, sh.regs[in.rs]);
            break;
        }
        case Op::Pop: {
            check_addr_reg(SP, "stack pointer");
            u64 a = st.regs[SP];
            u8 m = sh.mem_mask(a, 8);
            sh.regs[in.rd] = m;
            record(a, 8, false, m);
            break;
        }
        case Op::Call: {
            check_addr_reg(SP, "stack pointer");
            u64 a = st.regs[SP] - 8;
            sh.set_mem(a, 8, false); // return address is public
            record(a, 8, true, 0, true);
            break;
        }
        case Op::Ret: {
            check_addr_reg(SP, "stack pointer");
            u64 a = st.regs[SP];
            if (sh.mem_mask(a, 8))
                throw TaintAbort{off, "return through tainted return address"};
            record(a, 8, false, 0, true);
            break;
        }
        case Op::Load: {
            check_addr_reg(in.mem.base, "address base");
            u64 a = mem_addr();
            u8 m = sh.mem_mask(a, in.mem.width);
            sh.regs[in.rd] = m; // zero-extended load: upper bytes come in clean
            record(a, in.mem.width, false, m);
            break;
        }
        case Op::Store: {
            check_addr_reg(in.mem.base, "address base");
            u64 a = mem_addr();
            u8 m = u8(sh.regs[in.rd] & width_mask(in.mem.width));
            sh.set_mem_mask(a, in.mem.width, m);
            record(a, in.mem.width, true, m);
            break;
        }
        case Op::MAdd: case Op::MSub: case Op::MXor: case Op::MAnd: case Op::MOr: {
            check_addr_reg(in.mem.base, "address base");
            u64 a = mem_addr();
            u8 pre = sh.mem_mask(a, in.mem.width);
            bool t = pre != 0 || any(in.rd);
            u8 m = t ? width_mask(in.mem.width) : u8(0);
            record(a, in.mem.width, false, pre);
            sh.set_mem_mask(a, in.mem.width, m);
            sh.flags = t;
            record(a, in.mem.width, true, m);
            break;
        }
        case Op::MShl: case Op::MShr: {
            check_addr_reg(in.mem.base, "address base");
            u64 a = mem_addr();
            u8 pre = sh.mem_mask(a, in.mem.width);
            bool t = pre != 0;
            u8 m = t ? width_mask(in.mem.width) : u8(0);
            record(a, in.mem.width, false, pre);
            sh.set_mem_mask(a, in.mem.width, m);
            sh.flags = t;
            record(a, in.mem.width, true, m);
            break;
        }
        case Op::Copyn: {
            check_addr_reg(in.rd, "copy destination");
            check_addr_reg(in.rs, "copy source");
            check_addr_reg(in.aux & 0xf, "copy count");
            u64 dst = st.regs[in.rd], src = st.regs[in.rs];
            u64 n = st.regs[in.aux & 0xf];
            for (u64 i = 0; i < n; ++i) {
                u8 m = sh.mem_mask(src + 8 * i, 8);
                record(src + 8 * i, 8, false, m);
                sh.set_mem_mask(dst + 8 * i, 8, m);
                record(dst + 8 * i, 8, true, m);
            }
            break;
        }
        case Op::Alloc:
            check_addr_reg(in.rs, "allocation size");
            pending_alloc_size_ = st.regs[in.rs];
            break;
        case Op::Free:
            check_addr_reg(in.rs, "freed pointer");
            break;
        case Op::Realloc:
            check_addr_reg(in.rd, "realloc pointer");
            check_addr_reg(in.rs, "realloc size");
            pending_realloc_old_ = st.regs[in.rd];
            pending_alloc_size_ = st.regs[in.rs];
            break;
        case Op::BrkAdj:
            check_addr_reg(in.rs, "break adjustment");
            break;
        case Op::Msize:
            check_addr_reg(in.rs, "queried pointer");
            break;
        case Op::Classify: {
            check_addr_reg(in.rd, "classify address");
            u64 len = st.regs[in.rs];
            if (len == 0)
                warnings_.push_back(strf("classify with zero length at ", hex(off)));
            sh.set_mem(st.regs[in.rd], len, true);
            break;
        }
        case Op::Declassify: {
            check_addr_reg(in.rd, "declassify address");
            u64 len = st.regs[in.rs];
            if (len == 0)
                warnings_.push_back(strf("declassify with zero length at ", hex(off)));
            sh.set_mem(st.regs[in.rd], len, false);
            break;
        }
        case Op::Rand:
            sh.regs[in.rd] = 0;
            break;
        case Op::FlagSave:
            sh.regs[in.rd] = uniform(sh.flags);
            break;
        case Op::FlagRest:
            sh.flags = any(in.rs);
            break;
        case Op::Jmp: case Op::Jmps: case Op::Marker:
        case Op::Break: case Op::Halt:
            break;
        }
    }

    void post(const Instruction& in, u64, MachineState& st) {
        // Allocation results become visible only after the intrinsic ran.
        if (in.op == Op::Alloc) {
            u64 ptr = st.regs[in.rd];
            u64 n = detail::Allocator::round_size(pending_alloc_size_);
            shadow_.set_mem(ptr, n, false);
            live_[ptr] = n;
            shadow_.regs[in.rd] = 0;
        } else if (in.op == Op::Realloc) {
            u64 np = st.regs[in.rd];
            u64 old = pending_realloc_old_;
            u64 nn = detail::Allocator::round_size(pending_alloc_size_);
            u64 on = live_.count(old) ? live_[old] : 0;
            if (np != old) {
                shadow_.set_mem(np, nn, false);
                u64 moved = std::min(on, nn);
                for (u64 i = 0; i < moved; ++i)
                    if (shadow_.mem_byte(old + i))
                        shadow_.mem.insert(np + i);
                shadow_.set_mem(old, on, false);
                live_.erase(old);
            }
            live_[np] = nn;
            shadow_.regs[in.rd] = 0;
        }
    }

private:
    ShadowState shadow_;
    std::vector<AccessRecord> accesses_;
    std::vector<std::string> warnings_;
    std::unordered_map<u64, u64> live_;
    u64 pending_alloc_size_ = 0;
    u64 pending_realloc_old_ = 0;
};

// Spec-level single-step entry point: applies the taint policy of one
// instruction to `sh`, given the pre-instruction machine state.
inline void propagate(const Instruction& in, u64 offset, const MachineState& pre,
                      ShadowState& sh) {
    TaintSources none;
    std::vector<Bytes> no_inputs;
    TaintEngine eng(none, no_inputs);
    eng.shadow() = sh;
    eng.pre(in, offset, pre);
    sh = eng.shadow();
}

struct TaintRunResult {
    u64 program_hash = 0;
    bool rejected = false;
    u64 reject_offset = 0;
    std::string reject_reason;
    ExecResult exec;
    std::vector<AccessRecord> accesses;
    std::vector<std::string> warnings;
    ClassTable classes;
    std::unordered_set<u64> final_tainted_mem;
};

inline ClassTable classify_accesses(const std::vector<AccessRecord>& accesses) {
    ClassTable t;
    for (const auto& a : accesses) {
        if (a.structural)
            continue;
        InstrClass& c = t[a.offset];
        bool secret = a.taint_mask != 0;
        if (secret) {
            ++c.secret_accesses;
            c.reads_secret |= !a.is_write;
            c.writes_secret |= a.is_write;
        } else {
            ++c.public_accesses;
        }
    }
    return t;
}

inline TaintRunResult run_taint_once(const Program& prog, const std::vector<Bytes>& inputs,
                                     const TaintSources& sources, u64 os_seed = 1,
                                     u64 fuel = 50'000'000) {
    TaintRunResult out;
    out.program_hash = prog.hash();
    TaintEngine eng(sources, inputs);
    Hooks hooks;
    hooks.pre_instruction = [&](const Instruction& in, u64 off, const MachineState& st) {
        eng.pre(in, off, st);
    };
    hooks.post_instruction = [&](const Instruction& in, u64 off, MachineState& st) {
        eng.post(in, off, st);
    };
    ExecOptions opts;
    opts.inputs = inputs;
    opts.os_seed = os_seed;
    opts.fuel = fuel;
    try {
        out.exec = execute(prog, opts, &hooks);
    } catch (const TaintAbort& ab) {
        out.rejected = true;
        out.reject_offset = ab.offset;
        out.reject_reason = ab.reason;
        return out;
    }
    out.accesses = eng.accesses();
    out.warnings = eng.warnings();
    out.classes = classify_accesses(out.accesses);
    out.final_tainted_mem = eng.shadow().mem;
    return out;
}

struct TaintAnalysis {
    u64 program_hash = 0;
    std::vector<TaintRunResult> runs;
    ClassTable classes;
};

inline ClassTable merge_class_tables(const ClassTable& a, const ClassTable& b) {
    ClassTable out = a;
    for (const auto& [off, c] : b)
        out[off].join(c);
    return out;
}

// Multiple runs with different inputs; per-instruction classes are the join
// over runs.
inline TaintAnalysis run_taint(const Program& prog,
                               const std::vector<std::vector<Bytes>>& input_sets,
                               const TaintSources& sources, u64 os_seed = 1) {
    if (input_sets.empty())
        fail("run_taint needs at least one run");
    TaintAnalysis out;
    out.program_hash = prog.hash();
    for (size_t i = 0; i < input_sets.size(); ++i) {
        TaintRunResult r = run_taint_once(prog, input_sets[i], sources, os_seed + i);
        if (r.rejected)
            fail("taint run ", i, " rejected at ", hex(r.reject_offset), ": ",
                 r.reject_reason);
        out.classes = merge_class_tables(out.classes, r.classes);
        out.runs.push_back(std::move(r));
    }
    return out;
}

inline TaintAnalysis merge_runs(const std::vector<TaintAnalysis>& reports) {
    if (reports.empty())
        fail("nothing to merge");
    TaintAnalysis out;
    out.program_hash = reports[0].program_hash;
    for (const auto& r : reports) {
        if (r.program_hash != out.program_hash)
            fail("mismatched program hash in merge");
        out.classes = merge_class_tables(out.classes, r.classes);
        for (const auto& run : r.runs)
            out.runs.push_back(run);
    }
    return out;
}

} // namespace cb
