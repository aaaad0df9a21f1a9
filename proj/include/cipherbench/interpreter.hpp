#pragma once

#include "memory.hpp"
#include "program.hpp"

#include <array>
#include <functional>
#include <unordered_map>

namespace cb {

// Fuel cost of the secure-randomness intrinsic. The intrinsic stands in for
// an OS randomness service; the cost models the instructions the kernel path
// would execute, and keeps the relative expense of the three mask generators
// meaningful under the instruction-count overhead metric.
inline constexpr u64 RAND_FUEL = 512;

enum class Ev : u8 {
    Exec,
    MemRead,
    MemWrite,
    Call,
    Ret,
    Alloc,
    Free,
    Realloc,
    Brk,
    Classify,
    Declassify,
    Marker,
};

struct TraceEvent {
    Ev kind = Ev::Exec;
    u64 offset = 0; // instruction that produced the event
    u64 a = 0, b = 0, c = 0;
    u8 width = 0;
    u8 marker_id = 0;
    bool marker_begin = false;
    // MemRead:  a=addr            width
    // MemWrite: a=addr b=value    width
    // Call:     a=site b=target   Ret: (offset only)
    // Alloc:    a=size b=ptr      Free: a=ptr
    // Realloc:  a=old b=new c=size
    // Brk:      a=new break
    // Classify/Declassify: a=addr b=len
};

struct ExecutionTrace {
    std::vector<TraceEvent> events;
};

struct MachineState {
    std::array<u64, 16> regs{};
    bool zf = false, sf = false, cf = false;
    u64 pc = 0;
    u64 brk = layout::HEAP_BASE;
    SparseMemory mem;

    u8 packed_flags() const { return u8(zf) | u8(sf) << 1 | u8(cf) << 2; }
    void unpack_flags(u8 v) {
        zf = v & 1;
        sf = v & 2;
        cf = v & 4;
    }
};

struct MemAccessInfo {
    u64 instr_offset;
    u64 addr;
    unsigned width;
    u64 value; // written value (writes only)
    bool is_write;
};

struct Hooks {
    // Before the instruction's effects are applied (fuel already charged).
    std::function<void(const Instruction&, u64 offset, const MachineState&)> pre_instruction;
    // After the instruction completed; state is mutable for replay experiments.
    std::function<void(const Instruction&, u64 offset, MachineState&)> post_instruction;
    // After a memory write has been applied (per word for copyn).
    std::function<void(const MemAccessInfo&, const MachineState&)> mem_write;
    // Every trace event as it is generated, independent of recording.
    std::function<void(const TraceEvent&)> event;
};

enum class Stop { Halted, FuelExhausted, Fault };

enum class Fault {
    None,
    UnmappedAccess,
    StackOverflow,
    BreakTrap,
    InvalidPc,
    DecodeFault,
    AllocFault,
};

inline const char* fault_name(Fault f) {
    switch (f) {
    case Fault::None: return "none";
    case Fault::UnmappedAccess: return "unmapped access";
    case Fault::StackOverflow: return "stack overflow";
    case Fault::BreakTrap: return "break trap";
    case Fault::InvalidPc: return "invalid pc";
    case Fault::DecodeFault: return "decode fault";
    case Fault::AllocFault: return "allocator fault";
    }
    return "?";
}

struct ExecOptions {
    std::vector<Bytes> inputs;
    u64 fuel = 50'000'000;
    u64 os_seed = 1; // seeds the OS randomness source behind `rand`
    bool record_trace = true;
};

struct ExecResult {
    Stop stop = Stop::Halted;
    Fault fault = Fault::None;
    u64 fault_offset = 0;
    std::string fault_detail;
    MachineState state;
    ExecutionTrace trace;
    u64 fuel_used = 0;
    u64 instructions = 0;

    bool ok() const { return stop == Stop::Halted; }
};

namespace detail {

// Bump allocator with a first-fit free list. All bookkeeping is host-side;
// the guest heap never contains allocator metadata, so the only guest writes
// are the ones the program itself performs.
class Allocator {
public:
    explicit Allocator(MachineState& st, bool hardened) : st_(st), hardened_(hardened) {}

    static u64 round_size(u64 size) { return layout::align_up(std::max<u64>(size, 1), 16); }

    // Returns 0 on exhaustion. May grow the break (reported via grew()).
    u64 alloc(u64 size) {
        u64 need = round_size(size);
        for (auto it = free_.begin(); it != free_.end(); ++it) {
            if (it->second >= need) {
                u64 addr = it->first;
                u64 have = it->second;
                free_.erase(it);
                if (have > need)
                    free_[addr + need] = have - need;
                live_[addr] = need;
                return addr;
            }
        }
        if (bump_ + need > layout::HEAP_LIMIT)
            return 0;
        u64 addr = bump_;
        bump_ += need;
        if (bump_ > st_.brk)
            grow_to(layout::align_up(bump_, layout::PAGE));
        live_[addr] = need;
        return addr;
    }

    bool free_block(u64 ptr) {
        if (ptr == 0)
            return true;
        auto it = live_.find(ptr);
        if (it == live_.end())
            return false;
        free_[ptr] = it->second;
        live_.erase(it);
        return true;
    }

    // Realloc with raw data move; returns 0 on failure.
    u64 realloc_block(u64 ptr, u64 size, u64* moved_bytes) {
        *moved_bytes = 0;
        if (ptr == 0)
            return alloc(size);
        auto it = live_.find(ptr);
        if (it == live_.end())
            return 0;
        u64 old_size = it->second;
        u64 need = round_size(size);
        if (need == old_size)
            return ptr;
        u64 na = alloc(size);
        if (na == 0)
            return 0;
        u64 n = std::min(old_size, need);
        Bytes data = st_.mem.read_block(ptr, n);
        st_.mem.write_block(na, data.data(), n);
        *moved_bytes = n;
        free_block(ptr);
        return na;
    }

    u64 size_of(u64 ptr) const {
        auto it = live_.find(ptr);
        return it == live_.end() ? 0 : it->second;
    }

    bool adjust_brk(i64 delta) {
        i64 nb = i64(st_.brk) + delta;
        if (nb < i64(std::max(bump_, layout::HEAP_BASE)) || nb > i64(layout::HEAP_LIMIT))
            return false;
        if (u64(nb) > st_.brk)
            grow_to(u64(nb));
        else
            shrink_to(u64(nb));
        return true;
    }

    bool grew = false; // set when the break moved since last cleared

private:
    void grow_to(u64 nb) {
        u64 lo = st_.brk;
        st_.brk = nb;
        u64 map_lo = layout::align_down(lo, layout::PAGE);
        u64 map_hi = layout::align_up(nb, layout::PAGE);
        st_.mem.map_range(map_lo, map_hi - map_lo);
        if (hardened_) {
            st_.mem.map_range(map_lo + layout::D_MASK, map_hi - map_lo);
            st_.mem.map_range(map_lo + layout::D_SECRECY, map_hi - map_lo);
        }
        grew = true;
    }

    void shrink_to(u64 nb) {
        u64 hi = layout::align_up(st_.brk, layout::PAGE);
        u64 keep = layout::align_up(nb, layout::PAGE);
        st_.brk = nb;
        if (keep < hi) {
            st_.mem.unmap_range(keep, hi - keep);
            if (hardened_) {
                st_.mem.unmap_range(keep + layout::D_MASK, hi - keep);
                st_.mem.unmap_range(keep + layout::D_SECRECY, hi - keep);
            }
        }
        grew = true;
    }

    MachineState& st_;
    bool hardened_;
    u64 bump_ = layout::HEAP_BASE;
    std::map<u64, u64> free_;
    std::unordered_map<u64, u64> live_;
};

} // namespace detail

inline ExecResult execute(const Program& prog, const ExecOptions& opts, Hooks* hooks = nullptr) {
    ExecResult res;
    MachineState& st = res.state;

    // Map the fixed regions: stack, output window, input slots and statics.
    st.mem.map_range(layout::STACK_BASE, layout::STACK_TOP - layout::STACK_BASE);
    st.mem.map_range(layout::OUTPUT_BASE, layout::OUTPUT_LIMIT - layout::OUTPUT_BASE);
    st.mem.map_range(layout::INPUT_LEN_BASE, layout::MAX_INPUTS * 8);
    if (opts.inputs.size() > layout::MAX_INPUTS)
        fail("too many inputs (max ", layout::MAX_INPUTS, ")");
    for (size_t i = 0; i < opts.inputs.size(); ++i) {
        const Bytes& in = opts.inputs[i];
        if (in.size() > layout::INPUT_STRIDE)
            fail("input ", i, " larger than ", layout::INPUT_STRIDE, " bytes");
        u64 base = layout::INPUT_BASE + i * layout::INPUT_STRIDE;
        st.mem.map_range(base, layout::INPUT_STRIDE);
        st.mem.write_block(base, in.data(), in.size());
        st.mem.write(layout::INPUT_LEN_BASE + i * 8, in.size(), 8);
    }
    for (const auto& [addr, bytes] : prog.statics) {
        u64 lo = layout::align_down(addr, 16);
        u64 hi = layout::align_up(addr + bytes.size(), 16);
        st.mem.map_range(lo, hi - lo);
        st.mem.write_block(addr, bytes.data(), bytes.size());
    }
    for (const auto& [addr, len] : prog.premap)
        st.mem.map_range(addr, len);

    st.regs[SP] = layout::STACK_TOP;
    st.pc = prog.entry;

    detail::Allocator alloc(st, prog.hardened);
    u64 rng_state = opts.os_seed;

    std::unordered_map<u64, Instruction> icache;
    icache.reserve(1024);

    auto emit = [&](TraceEvent ev) {
        if (opts.record_trace)
            res.trace.events.push_back(ev);
        if (hooks && hooks->event)
            hooks->event(ev);
    };

    Fault pending_fault = Fault::None;
    std::string fault_detail;
    u64 fault_addr = 0;

    auto check_access = [&](u64 addr, unsigned width) -> bool {
        u64 end = addr + width;
        if (end > layout::STACK_GUARD_BASE && addr < layout::STACK_BASE) {
            pending_fault = Fault::StackOverflow;
            fault_detail = strf("access at ", hex(addr), " hit the stack guard");
            return false;
        }
        if (!st.mem.is_mapped(addr, width)) {
            pending_fault = Fault::UnmappedAccess;
            fault_detail = strf("unmapped access at ", hex(addr), " width ", width);
            return false;
        }
        fault_addr = addr;
        return true;
    };

    u64 pc = st.pc;
    while (true) {
        st.pc = pc;
        const u8* cp = prog.code_at(pc);
        if (!cp) {
            res.stop = Stop::Fault;
            res.fault = Fault::InvalidPc;
            res.fault_offset = pc;
            res.fault_detail = strf("pc ", hex(pc), " outside code sections");
            return res;
        }
        Instruction* inp;
        auto ic = icache.find(pc);
        if (ic != icache.end()) {
            inp = &ic->second;
        } else {
            u64 rem = 0;
            prog.code_at(pc, &rem);
            DecodeError derr;
            auto dec = decode(std::span<const u8>(cp, rem), 0, &derr);
            if (!dec) {
                res.stop = Stop::Fault;
                res.fault = Fault::DecodeFault;
                res.fault_offset = pc;
                res.fault_detail = derr.reason;
                return res;
            }
            inp = &icache.emplace(pc, *dec).first->second;
        }
        const Instruction& in = *inp;

        u64 cost = 1;
        if (in.op == Op::Rand)
            cost = RAND_FUEL;
        else if (in.op == Op::Copyn)
            cost = std::max<u64>(1, st.regs[in.aux & 0xf]);
        if (res.fuel_used + cost > opts.fuel) {
            res.stop = Stop::FuelExhausted;
            res.fault_offset = pc;
            return res;
        }
        res.fuel_used += cost;
        ++res.instructions;

        emit({Ev::Exec, pc});
        if (hooks && hooks->pre_instruction)
            hooks->pre_instruction(in, pc, st);

        u64 next = pc + encoded_length(in.op);
        pending_fault = Fault::None;

        auto set_zsf = [&](u64 r) {
            st.zf = r == 0;
            st.sf = (r >> 63) & 1;
        };
        auto alu = [&](Op op, u64 a, u64 b) -> u64 {
            u64 r = 0;
            switch (op) {
            case Op::AddRR: case Op::AddRI: case Op::MAdd:
                r = a + b;
                st.cf = r < a;
                break;
            case Op::SubRR: case Op::SubRI: case Op::MSub:
            case Op::CmpRR: case Op::CmpRI:
                r = a - b;
                st.cf = a < b;
                break;
            case Op::XorRR: case Op::XorRI: case Op::MXor:
                r = a ^ b;
                st.cf = false;
                break;
            case Op::AndRR: case Op::AndRI: case Op::MAnd:
                r = a & b;
                st.cf = false;
                break;
            case Op::OrRR: case Op::OrRI: case Op::MOr:
                r = a | b;
                st.cf = false;
                break;
            case Op::ShlRR: case Op::ShlRI: case Op::MShl: {
                unsigned n = unsigned(b) & 63;
                if (n == 0)
                    return a;
                st.cf = (a >> (64 - n)) & 1;
                r = a << n;
                break;
            }
            case Op::ShrRR: case Op::ShrRI: case Op::MShr: {
                unsigned n = unsigned(b) & 63;
                if (n == 0)
                    return a;
                st.cf = (a >> (n - 1)) & 1;
                r = a >> n;
                break;
            }
            default:
                break;
            }
            set_zsf(r);
            return r;
        };
        auto trunc = [](u64 v, unsigned width) {
            return width >= 8 ? v : v & ((u64(1) << (8 * width)) - 1);
        };
        auto sext_imm = [&]() { return u64(i64(i8(in.aux))); };

        auto do_read = [&](u64 addr, unsigned width, u64& out) -> bool {
            if (!check_access(addr, width))
                return false;
            out = st.mem.read(addr, width);
            emit({Ev::MemRead, pc, addr, 0, 0, u8(width)});
            return true;
        };
        auto do_write = [&](u64 addr, unsigned width, u64 value) -> bool {
            if (!check_access(addr, width))
                return false;
            value = trunc(value, width);
            st.mem.write(addr, value, width);
            emit({Ev::MemWrite, pc, addr, value, 0, u8(width)});
            if (hooks && hooks->mem_write)
                hooks->mem_write({pc, addr, width, value, true}, st);
            return true;
        };
        auto push64 = [&](u64 v) -> bool {
            u64 nsp = st.regs[SP] - 8;
            if (!do_write(nsp, 8, v))
                return false;
            st.regs[SP] = nsp;
            return true;
        };

        bool done = false; // halt
        switch (in.op) {
        case Op::Halt:
            done = true;
            break;
        case Op::Break: {
            auto it = prog.dispatch.find(pc);
            if (it == prog.dispatch.end()) {
                pending_fault = Fault::BreakTrap;
                fault_detail = "break executed with no dispatch entry";
            } else {
                next = it->second;
            }
            break;
        }
        case Op::Ret: {
            u64 target;
            if (do_read(st.regs[SP], 8, target)) {
                st.regs[SP] += 8;
                emit({Ev::Ret, pc});
                next = target;
            }
            break;
        }
        case Op::Jmp: case Op::Jmps:
            next = branch_target(in, pc);
            break;
        case Op::Jz: case Op::Jzs:
            if (st.zf)
                next = branch_target(in, pc);
            break;
        case Op::Jnz: case Op::Jnzs:
            if (!st.zf)
                next = branch_target(in, pc);
            break;
        case Op::Call: {
            u64 target = branch_target(in, pc);
            if (push64(next)) {
                emit({Ev::Call, pc, pc, target});
                next = target;
            }
            break;
        }
        case Op::Marker:
            emit({Ev::Marker, pc, 0, 0, 0, 0, u8(in.aux & 0x7f), (in.aux & 0x80) != 0});
            break;
        case Op::MovRR:
            st.regs[in.rd] = st.regs[in.rs];
            break;
        case Op::MovImm:
            st.regs[in.rd] = u64(in.imm);
            break;
        case Op::AddRR: case Op::SubRR: case Op::XorRR:
        case Op::AndRR: case Op::OrRR: case Op::ShlRR: case Op::ShrRR:
            st.regs[in.rd] = alu(in.op, st.regs[in.rd], st.regs[in.rs]);
            break;
        case Op::AddRI: case Op::SubRI: case Op::XorRI:
        case Op::AndRI: case Op::OrRI:
            st.regs[in.rd] = alu(in.op, st.regs[in.rd], sext_imm());
            break;
        case Op::ShlRI: case Op::ShrRI:
            st.regs[in.rd] = alu(in.op, st.regs[in.rd], in.aux);
            break;
        case Op::CmpRR:
            alu(in.op, st.regs[in.rd], st.regs[in.rs]);
            break;
        case Op::CmpRI:
            alu(in.op, st.regs[in.rd], sext_imm());
            break;
        case Op::Cmovz:
            if (st.zf)
                st.regs[in.rd] = st.regs[in.rs];
            break;
        case Op::Cmovnz:
            if (!st.zf)
                st.regs[in.rd] = st.regs[in.rs];
            break;
        case Op::Push:
            push64(st.regs[in.rs]);
            break;
        case Op::Pop: {
            u64 v;
            if (do_read(st.regs[SP], 8, v)) {
                st.regs[in.rd] = v;
                st.regs[SP] += 8;
            }
            break;
        }
        case Op::Load: {
            u64 addr = st.regs[in.mem.base] + u64(i64(in.mem.disp));
            u64 v;
            if (do_read(addr, in.mem.width, v))
                st.regs[in.rd] = v;
            break;
        }
        case Op::Store: {
            u64 addr = st.regs[in.mem.base] + u64(i64(in.mem.disp));
            do_write(addr, in.mem.width, st.regs[in.rd]);
            break;
        }
        case Op::MAdd: case Op::MSub: case Op::MXor: case Op::MAnd: case Op::MOr: {
            u64 addr = st.regs[in.mem.base] + u64(i64(in.mem.disp));
            u64 v;
            if (do_read(addr, in.mem.width, v))
                do_write(addr, in.mem.width, alu(in.op, v, trunc(st.regs[in.rd], in.mem.width)));
            break;
        }
        case Op::MShl: case Op::MShr: {
            u64 addr = st.regs[in.mem.base] + u64(i64(in.mem.disp));
            u64 v;
            if (do_read(addr, in.mem.width, v))
                do_write(addr, in.mem.width, alu(in.op, v, in.aux));
            break;
        }
        case Op::Alloc: {
            alloc.grew = false;
            u64 ptr = alloc.alloc(st.regs[in.rs]);
            if (ptr == 0) {
                pending_fault = Fault::AllocFault;
                fault_detail = strf("allocation of ", st.regs[in.rs], " bytes failed");
                break;
            }
            emit({Ev::Alloc, pc, st.regs[in.rs], ptr});
            if (alloc.grew)
                emit({Ev::Brk, pc, st.brk});
            st.regs[in.rd] = ptr;
            break;
        }
        case Op::Free:
            if (!alloc.free_block(st.regs[in.rs])) {
                pending_fault = Fault::AllocFault;
                fault_detail = strf("free of unknown pointer ", hex(st.regs[in.rs]));
            } else {
                emit({Ev::Free, pc, st.regs[in.rs]});
            }
            break;
        case Op::Realloc: {
            alloc.grew = false;
            u64 old = st.regs[in.rd];
            u64 moved = 0;
            u64 np = alloc.realloc_block(old, st.regs[in.rs], &moved);
            if (np == 0) {
                pending_fault = Fault::AllocFault;
                fault_detail = strf("realloc of ", hex(old), " failed");
                break;
            }
            emit({Ev::Realloc, pc, old, np, st.regs[in.rs]});
            if (alloc.grew)
                emit({Ev::Brk, pc, st.brk});
            st.regs[in.rd] = np;
            break;
        }
        case Op::BrkAdj: {
            alloc.grew = false;
            if (!alloc.adjust_brk(i64(st.regs[in.rs]))) {
                pending_fault = Fault::AllocFault;
                fault_detail = "invalid break adjustment";
                break;
            }
            if (alloc.grew)
                emit({Ev::Brk, pc, st.brk});
            st.regs[in.rd] = st.brk;
            break;
        }
        case Op::Msize: {
            u64 sz = alloc.size_of(st.regs[in.rs]);
            if (sz == 0) {
                pending_fault = Fault::AllocFault;
                fault_detail = strf("msize of unknown pointer ", hex(st.regs[in.rs]));
                break;
            }
            st.regs[in.rd] = sz;
            break;
        }
        case Op::Classify:
            emit({Ev::Classify, pc, st.regs[in.rd], st.regs[in.rs]});
            break;
        case Op::Declassify:
            emit({Ev::Declassify, pc, st.regs[in.rd], st.regs[in.rs]});
            break;
        case Op::Rand:
            st.regs[in.rd] = splitmix64(rng_state);
            break;
        case Op::Copyn: {
            u64 dst = st.regs[in.rd];
            u64 src = st.regs[in.rs];
            u64 n = st.regs[in.aux & 0xf];
            for (u64 i = 0; i < n; ++i) {
                u64 v;
                if (!do_read(src + 8 * i, 8, v) || !do_write(dst + 8 * i, 8, v))
                    break;
            }
            break;
        }
        case Op::FlagSave:
            st.regs[in.rd] = st.packed_flags();
            break;
        case Op::FlagRest:
            st.unpack_flags(u8(st.regs[in.rs]));
            break;
        }

        if (pending_fault != Fault::None) {
            res.stop = Stop::Fault;
            res.fault = pending_fault;
            res.fault_offset = pc;
            res.fault_detail = fault_detail;
            (void)fault_addr;
            return res;
        }
        if (hooks && hooks->post_instruction)
            hooks->post_instruction(in, pc, st);
        if (done) {
            res.stop = Stop::Halted;
            st.pc = next;
            return res;
        }
        pc = next;
    }
}

// OS-randomness commitment recorded in attack traces for audit.
inline u64 os_seed_commitment(u64 os_seed) {
    Bytes b(8);
    store_le(b.data(), os_seed, 8);
    return fnv1a64(b.data(), 8, 0x9ae16a3b2f90404fULL);
}

} // namespace cb
