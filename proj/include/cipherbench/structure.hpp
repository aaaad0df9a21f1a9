#pragma once

#include "interpreter.hpp"

#include <map>
#include <set>

// Dynamic structure analysis: basic-block bounds from executed traces, and
// per-instruction register/flag liveness. Liveness is computed from observed
// runs only; unobserved offsets keep an empty scratch set so the rewriter
// falls back to spilling.

namespace cb {

struct BasicBlock {
    u64 start = 0;
    u64 end = 0; // one past the last instruction byte
    std::set<u64> successors;
};

struct BasicBlockTable {
    std::vector<BasicBlock> blocks; // sorted by start
    std::vector<u64> coverage_gaps; // statically known targets never executed

    const BasicBlock* containing(u64 offset) const {
        for (const auto& b : blocks)
            if (offset >= b.start && offset < b.end)
                return &b;
        return nullptr;
    }
    const BasicBlock* at(u64 start) const {
        for (const auto& b : blocks)
            if (b.start == start)
                return &b;
        return nullptr;
    }
};

struct LivenessInfo {
    u16 scratch_regs = 0;   // dead after the instruction, in every observed run
    u16 scratch_before = 0; // dead before the instruction (for inserted code)
    bool flags_live_after = false;
    bool flags_live_before = false;
    bool observed = false;
};

struct LivenessTable {
    std::map<u64, LivenessInfo> at;

    u16 scratch(u64 offset) const {
        auto it = at.find(offset);
        return it == at.end() ? u16(0) : it->second.scratch_regs;
    }
    u16 scratch_before(u64 offset) const {
        auto it = at.find(offset);
        return it == at.end() ? u16(0) : it->second.scratch_before;
    }
    bool flags_live(u64 offset) const { // after the instruction
        auto it = at.find(offset);
        return it == at.end() ? true : it->second.flags_live_after;
    }
    bool flags_live_before(u64 offset) const {
        auto it = at.find(offset);
        return it == at.end() ? true : it->second.flags_live_before;
    }
};

namespace detail {

class StructureDecoder {
public:
    explicit StructureDecoder(const Program& prog) : prog_(prog) {}

    const Instruction& at(u64 offset) {
        auto it = cache_.find(offset);
        if (it != cache_.end())
            return it->second;
        u64 rem = 0;
        const u8* p = prog_.code_at(offset, &rem);
        if (!p)
            fail("offset ", hex(offset), " outside code");
        auto in = decode(std::span<const u8>(p, rem), 0);
        if (!in)
            fail("undecodable instruction at ", hex(offset));
        return cache_.emplace(offset, *in).first->second;
    }

private:
    const Program& prog_;
    std::unordered_map<u64, Instruction> cache_;
};

} // namespace detail

inline BasicBlockTable find_basic_blocks(const Program& prog,
                                         const std::vector<ExecutionTrace>& traces) {
    detail::StructureDecoder dec(prog);

    std::set<u64> executed;
    std::set<u64> leaders;
    std::map<u64, std::set<u64>> edges; // from-instruction -> next offsets seen
    std::set<u64> static_targets;

    leaders.insert(prog.entry);
    for (const auto& tr : traces) {
        u64 prev = 0;
        bool have_prev = false;
        for (const auto& ev : tr.events) {
            if (ev.kind != Ev::Exec)
                continue;
            u64 off = ev.offset;
            executed.insert(off);
            const Instruction& in = dec.at(off);
            if (have_prev) {
                const Instruction& pi = dec.at(prev);
                if (is_terminator(pi.op)) {
                    leaders.insert(off);
                    edges[prev].insert(off);
                }
            }
            if (is_branch(in.op) && in.op != Op::Call) {
                leaders.insert(branch_target(in, off)); // may be unexecuted
                static_targets.insert(branch_target(in, off));
                if (is_conditional(in.op)) {
                    leaders.insert(off + encoded_length(in.op));
                    static_targets.insert(off + encoded_length(in.op));
                }
            }
            if (in.op == Op::Call) {
                leaders.insert(branch_target(in, off));
                static_targets.insert(branch_target(in, off));
                leaders.insert(off + encoded_length(in.op)); // return site
            }
            prev = off;
            have_prev = true;
        }
    }

    BasicBlockTable table;
    if (executed.empty())
        return table;

    // blocks = maximal runs of executed instructions between leaders
    u64 block_start = 0;
    bool open = false;
    u64 prev_off = 0;
    auto close = [&](u64 end) {
        if (open)
            table.blocks.push_back({block_start, end, {}});
        open = false;
    };
    for (u64 off : executed) {
        const Instruction& in = dec.at(off);
        u64 end = off + encoded_length(in.op);
        if (open && (leaders.count(off) || prev_off != off))
            close(prev_off);
        if (!open) {
            open = true;
            block_start = off;
        }
        if (is_terminator(in.op)) {
            close(end);
        }
        prev_off = end;
    }
    close(prev_off);

    // successor edges at block granularity
    for (auto& b : table.blocks) {
        // find the terminator (last instruction of the block)
        u64 off = b.start;
        u64 last = b.start;
        while (off < b.end) {
            last = off;
            off += encoded_length(dec.at(off).op);
        }
        const Instruction& t = dec.at(last);
        if (is_branch(t.op) && t.op != Op::Call)
            b.successors.insert(branch_target(t, last));
        if (!(t.op == Op::Jmp || t.op == Op::Jmps || t.op == Op::Ret || t.op == Op::Halt ||
              t.op == Op::Break))
            b.successors.insert(b.end);
        for (u64 nxt : edges[last])
            b.successors.insert(nxt);
    }

    for (u64 t : static_targets)
        if (!executed.count(t))
            table.coverage_gaps.push_back(t);
    return table;
}

inline LivenessTable compute_liveness(const Program& prog,
                                      const std::vector<ExecutionTrace>& traces) {
    detail::StructureDecoder dec(prog);
    LivenessTable table;

    for (const auto& tr : traces) {
        // collect executed offsets in order
        std::vector<u64> seq;
        seq.reserve(tr.events.size());
        for (const auto& ev : tr.events)
            if (ev.kind == Ev::Exec)
                seq.push_back(ev.offset);

        u16 live = u16(1) << SP; // the stack pointer is always live
        bool flags_live = false;
        for (size_t i = seq.size(); i-- > 0;) {
            u64 off = seq[i];
            const Instruction& in = dec.at(off);
            RegUse use = reg_use(in);

            LivenessInfo& info = table.at[off];
            u16 live_after = live | (u16(1) << SP);
            bool flags_after = flags_live;

            // backward transfer
            live = u16((live & ~use.writes) | use.reads) | u16(1) << SP;
            if (use.writes_flags)
                flags_live = false;
            if (use.reads_flags)
                flags_live = true;

            u16 live_before = u16(live | (u16(1) << SP));
            if (!info.observed) {
                info.observed = true;
                info.scratch_regs = u16(~live_after);
                info.scratch_before = u16(~live_before);
                info.flags_live_after = flags_after;
                info.flags_live_before = flags_live;
            } else {
                info.scratch_regs &= u16(~live_after);
                info.scratch_before &= u16(~live_before);
                info.flags_live_after |= flags_after;
                info.flags_live_before |= flags_live;
            }
        }
    }
    (void)prog;
    return table;
}

} // namespace cb
