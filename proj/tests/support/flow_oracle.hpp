#pragma once

// Independent information-flow oracle: bit-precise forward slicing over the
// concrete trace, with value-aware clearing (xor r,r; AND with concrete
// zeros; shifts move bit labels). By construction it never marks more than
// the byte-level engine, and the engine must never mark less.
//
// Test-only; deliberately shares no propagation code with the taint engine.

#include "cipherbench/interpreter.hpp"

#include <bit>
#include <unordered_map>

namespace cb::test {

class FlowOracle {
public:
    std::array<u64, 16> regs{}; // per-bit labels
    std::unordered_map<u64, u8> mem;
    bool flags = false;

    struct WriteMask {
        u64 offset;
        u64 addr;
        unsigned width;
        u64 bitmask; // tainted bits of the written value
    };
    std::vector<WriteMask> writes;

    void classify_range(u64 addr, u64 len) {
        for (u64 i = 0; i < len; ++i)
            mem[addr + i] = 0xff;
    }

    u64 mem_bits(u64 addr, unsigned width) const {
        u64 m = 0;
        for (unsigned i = 0; i < width; ++i) {
            auto it = mem.find(addr + i);
            if (it != mem.end())
                m |= u64(it->second) << (8 * i);
        }
        return m;
    }

    void set_mem_bits(u64 addr, unsigned width, u64 bits) {
        for (unsigned i = 0; i < width; ++i) {
            u8 b = u8(bits >> (8 * i));
            if (b)
                mem[addr + i] = b;
            else
                mem.erase(addr + i);
        }
    }

    void pre(const Instruction& in, u64 off, const MachineState& st) {
        auto wmask = [](unsigned w) {
            return w >= 8 ? ~u64(0) : (u64(1) << (8 * w)) - 1;
        };
        auto add_like = [&](u64 at, u64 bt) -> u64 {
            u64 both = at | bt;
            if (!both)
                return 0;
            int p = std::countr_zero(both);
            return ~u64(0) << p;
        };
        auto and_taint = [&](u64 a, u64 at, u64 b, u64 bt) {
            u64 t = 0;
            for (int i = 0; i < 64; ++i) {
                u64 bit = u64(1) << i;
                bool a0 = !(a & bit) && !(at & bit);
                bool b0 = !(b & bit) && !(bt & bit);
                if (!a0 && !b0 && ((at | bt) & bit))
                    t |= bit;
            }
            return t;
        };
        auto or_taint = [&](u64 a, u64 at, u64 b, u64 bt) {
            u64 t = 0;
            for (int i = 0; i < 64; ++i) {
                u64 bit = u64(1) << i;
                bool a1 = (a & bit) && !(at & bit);
                bool b1 = (b & bit) && !(bt & bit);
                if (!a1 && !b1 && ((at | bt) & bit))
                    t |= bit;
            }
            return t;
        };
        auto alu_bits = [&](Op op, u64 a, u64 at, u64 b, u64 bt) -> u64 {
            switch (op) {
            case Op::AddRR: case Op::AddRI: case Op::MAdd:
            case Op::SubRR: case Op::SubRI: case Op::MSub:
            case Op::CmpRR: case Op::CmpRI:
                return add_like(at, bt);
            case Op::XorRR: case Op::XorRI: case Op::MXor:
                return at | bt;
            case Op::AndRR: case Op::AndRI: case Op::MAnd:
                return and_taint(a, at, b, bt);
            case Op::OrRR: case Op::OrRI: case Op::MOr:
                return or_taint(a, at, b, bt);
            case Op::ShlRR: case Op::ShlRI: case Op::MShl:
                if (bt)
                    return ~u64(0);
                return at << (b & 63);
            case Op::ShrRR: case Op::ShrRI: case Op::MShr:
                if (bt)
                    return ~u64(0);
                return at >> (b & 63);
            default:
                return at | bt;
            }
        };
        auto mem_addr = [&] { return st.regs[in.mem.base] + u64(i64(in.mem.disp)); };
        auto sext_imm = [&] { return u64(i64(i8(in.aux))); };
        auto record = [&](u64 addr, unsigned w, u64 bits) {
            writes.push_back({off, addr, w, bits});
        };

        switch (in.op) {
        case Op::MovImm:
            regs[in.rd] = 0;
            break;
        case Op::MovRR:
            regs[in.rd] = regs[in.rs];
            break;
        case Op::AddRR: case Op::SubRR: case Op::XorRR:
        case Op::AndRR: case Op::OrRR: case Op::ShlRR: case Op::ShrRR: {
            u64 t;
            if (in.op == Op::XorRR && in.rd == in.rs)
                t = 0; // exact: x ^ x is constant
            else
                t = alu_bits(in.op, st.regs[in.rd], regs[in.rd], st.regs[in.rs], regs[in.rs]);
            flags = (regs[in.rd] | regs[in.rs]) != 0;
            regs[in.rd] = t;
            break;
        }
        case Op::AddRI: case Op::SubRI: case Op::XorRI:
        case Op::AndRI: case Op::OrRI: {
            u64 t = alu_bits(in.op, st.regs[in.rd], regs[in.rd], sext_imm(), 0);
            flags = regs[in.rd] != 0;
            regs[in.rd] = t;
            break;
        }
        case Op::ShlRI: case Op::ShrRI: {
            u64 t = alu_bits(in.op, st.regs[in.rd], regs[in.rd], in.aux, 0);
            flags = regs[in.rd] != 0;
            regs[in.rd] = t;
            break;
        }
        case Op::CmpRR:
            flags = (regs[in.rd] | regs[in.rs]) != 0;
            break;
        case Op::CmpRI:
            flags = regs[in.rd] != 0;
            break;
        case Op::Cmovz: case Op::Cmovnz: {
            if (!flags) {
                bool take = in.op == Op::Cmovz ? st.zf : !st.zf;
                if (take)
                    regs[in.rd] = regs[in.rs];
            } else {
                regs[in.rd] =
                    regs[in.rd] | regs[in.rs] | (st.regs[in.rd] ^ st.regs[in.rs]);
            }
            break;
        }
        case Op::Push: {
            u64 a = st.regs[SP] - 8;
            set_mem_bits(a, 8, regs[in.rs]);
            record(a, 8, regs[in.rs]);
            break;
        }
        case Op::Pop:
            regs[in.rd] = mem_bits(st.regs[SP], 8);
            break;
        case Op::Call: {
            u64 a = st.regs[SP] - 8;
            set_mem_bits(a, 8, 0); // return address is public
            break;
        }
        case Op::Load: {
            u64 a = mem_addr();
            regs[in.rd] = mem_bits(a, in.mem.width);
            break;
        }
        case Op::Store: {
            u64 a = mem_addr();
            u64 bits = regs[in.rd] & wmask(in.mem.width);
            set_mem_bits(a, in.mem.width, bits);
            record(a, in.mem.width, bits);
            break;
        }
        case Op::MAdd: case Op::MSub: case Op::MXor: case Op::MAnd: case Op::MOr: {
            u64 a = mem_addr();
            u64 cur = st.mem.read(a, in.mem.width);
            u64 cur_t = mem_bits(a, in.mem.width);
            u64 t = alu_bits(in.op, cur, cur_t,
                             st.regs[in.rd] & wmask(in.mem.width),
                             regs[in.rd] & wmask(in.mem.width)) &
                    wmask(in.mem.width);
            flags = (cur_t | regs[in.rd]) != 0;
            set_mem_bits(a, in.mem.width, t);
            record(a, in.mem.width, t);
            break;
        }
        case Op::MShl: case Op::MShr: {
            u64 a = mem_addr();
            u64 cur = st.mem.read(a, in.mem.width);
            u64 cur_t = mem_bits(a, in.mem.width);
            u64 t = alu_bits(in.op, cur, cur_t, in.aux, 0) & wmask(in.mem.width);
            flags = cur_t != 0;
            set_mem_bits(a, in.mem.width, t);
            record(a, in.mem.width, t);
            break;
        }
        case Op::Copyn: {
            u64 dst = st.regs[in.rd], src = st.regs[in.rs];
            u64 n = st.regs[in.aux & 0xf];
            for (u64 i = 0; i < n; ++i) {
                u64 bits = mem_bits(src + 8 * i, 8);
                set_mem_bits(dst + 8 * i, 8, bits);
                record(dst + 8 * i, 8, bits);
            }
            break;
        }
        case Op::Classify:
            classify_range(st.regs[in.rd], st.regs[in.rs]);
            break;
        case Op::Declassify:
            for (u64 i = 0; i < st.regs[in.rs]; ++i)
                mem.erase(st.regs[in.rd] + i);
            break;
        case Op::Rand:
            regs[in.rd] = 0;
            break;
        case Op::FlagSave:
            regs[in.rd] = flags ? 0x7 : 0;
            break;
        case Op::FlagRest:
            flags = (regs[in.rs] & 0x7) != 0;
            break;
        case Op::Alloc: case Op::Msize:
            regs[in.rd] = 0;
            break;
        case Op::Realloc:
            pending_old_ = st.regs[in.rd];
            break;
        case Op::Ret: case Op::Jmp: case Op::Jmps: case Op::Jz: case Op::Jnz:
        case Op::Jzs: case Op::Jnzs: case Op::Marker: case Op::Break:
        case Op::Halt: case Op::Free: case Op::BrkAdj:
            break;
        }
    }

    void post(const Instruction& in, u64, MachineState& st) {
        if (in.op == Op::Realloc) {
            u64 np = st.regs[in.rd];
            if (np != pending_old_) {
                // conservative: move labels for the window that can have moved
                std::vector<std::pair<u64, u8>> moved;
                for (auto& [a, b] : mem)
                    if (a >= pending_old_ && a < pending_old_ + 0x10000)
                        moved.emplace_back(np + (a - pending_old_), b);
                for (auto& [a, b] : moved)
                    mem[a] = b;
            }
            regs[in.rd] = 0;
        }
    }

private:
    u64 pending_old_ = 0;
};

} // namespace cb::test
