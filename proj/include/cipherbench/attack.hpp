#pragma once

#include "interpreter.hpp"
#include "program.hpp"

#include <array>
#include <map>
#include <set>

// Deterministic memory-encryption attacker. The oracle maps (block address,
// 16-byte content) to a 128-bit tag under a boot seed; equal plaintexts at
// the same address always produce the same tag, and that equality relation
// is all the attacker ever uses. Observation granularity is one snapshot of
// each touched block per guest write (single-stepping controlled channel),
// optionally coarsened to marker boundaries.

namespace cb {

using Tag = std::array<u8, 16>;

inline constexpr u64 BLOCK = 16;
inline constexpr u64 MARKER_RECORD_FLAG = u64(1) << 63;

class EncryptionOracle {
public:
    EncryptionOracle(u64 seed0, u64 seed1) : sip_(seed0, seed1), s0_(seed0), s1_(seed1) {}

    Tag tag(u64 block_addr, const u8* content) const {
        u8 buf[24];
        store_le(buf, block_addr, 8);
        std::copy(content, content + BLOCK, buf + 8);
        return sip_.digest(buf, sizeof buf);
    }

    Tag tag_of(const SparseMemory& mem, u64 block_addr) const {
        Bytes content = mem.read_block(block_addr, BLOCK);
        return tag(block_addr, content.data());
    }

    u64 commitment() const {
        u8 buf[16];
        store_le(buf, s0_, 8);
        store_le(buf + 8, s1_, 8);
        return fnv1a64(buf, sizeof buf);
    }

private:
    SipHash128 sip_;
    u64 s0_, s1_;
};

struct Observation {
    u64 step = 0; // global event counter at observation time
    u64 addr = 0; // block-aligned
    Tag tag{};
};

struct MarkerRecord {
    u64 step = 0;
    u8 id = 0;
    bool begin = false;
};

struct CiphertextTrace {
    u64 seed_commitment = 0;
    u64 program_hash = 0;
    std::vector<Observation> observations;
    std::vector<MarkerRecord> markers;

    std::vector<const Observation*> at(u64 block_addr) const {
        std::vector<const Observation*> out;
        for (const auto& o : observations)
            if (o.addr == block_addr)
                out.push_back(&o);
        return out;
    }
};

struct ObserveOptions {
    bool per_marker = false; // coarser weaker-attacker sampling
};

// Runs the program and records the attacker's view. The attacker sees one
// tag per touched 16-byte block per write (and the blocks realloc moves).
inline CiphertextTrace observe(const Program& prog, const ExecOptions& opts,
                               const EncryptionOracle& oracle,
                               const ObserveOptions& oopts = {},
                               ExecResult* exec_out = nullptr) {
    CiphertextTrace trace;
    trace.seed_commitment = oracle.commitment();
    trace.program_hash = prog.hardened ? prog.meta.original_hash : prog.hash();

    u64 step = 0;
    std::set<u64> dirty;
    const MachineState* state = nullptr;

    Hooks hooks;
    hooks.pre_instruction = [&](const Instruction&, u64, const MachineState& st) {
        state = &st; // the machine mutates in place; events read live memory
    };
    hooks.mem_write = [&](const MemAccessInfo& acc, const MachineState& st) {
        state = &st;
        u64 first = layout::align_down(acc.addr, BLOCK);
        u64 last = layout::align_down(acc.addr + acc.width - 1, BLOCK);
        for (u64 blk = first; blk <= last; blk += BLOCK) {
            if (oopts.per_marker)
                dirty.insert(blk);
            else
                trace.observations.push_back({step, blk, oracle.tag_of(st.mem, blk)});
        }
    };
    hooks.event = [&](const TraceEvent& ev) {
        ++step;
        if (ev.kind == Ev::Realloc && state) {
            // the moved block contents become visible at the new address
            u64 lo = layout::align_down(ev.b, BLOCK);
            u64 hi = layout::align_down(ev.b + detail::Allocator::round_size(ev.c) - 1, BLOCK);
            for (u64 blk = lo; blk <= hi; blk += BLOCK) {
                if (oopts.per_marker)
                    dirty.insert(blk);
                else
                    trace.observations.push_back({step, blk, oracle.tag_of(state->mem, blk)});
            }
        }
        if (ev.kind == Ev::Marker) {
            if (oopts.per_marker && state) {
                for (u64 blk : dirty)
                    trace.observations.push_back({step, blk, oracle.tag_of(state->mem, blk)});
                dirty.clear();
            }
            trace.markers.push_back({step, ev.marker_id, ev.marker_begin});
        }
    };

    ExecOptions run = opts;
    run.record_trace = false;
    ExecResult res = execute(prog, run, &hooks);
    if (exec_out)
        *exec_out = std::move(res);
    return trace;
}

// Change sequence for one block: entry i says whether the i-th observation
// differs from its predecessor.
inline std::vector<bool> collision_attack(const CiphertextTrace& trace, u64 block_addr) {
    auto obs = trace.at(block_addr);
    if (obs.size() < 2)
        fail("block ", hex(block_addr), " observed fewer than twice");
    std::vector<bool> changed;
    for (size_t i = 1; i < obs.size(); ++i)
        changed.push_back(obs[i]->tag != obs[i - 1]->tag);
    return changed;
}

// Recovers cswap decision bits: bit i is 1 iff the target block's ciphertext
// changed across the i-th marker span of `marker_id`.
inline std::vector<int> infer_cswap_bits(const CiphertextTrace& trace, u64 p_block,
                                         u8 marker_id) {
    struct Span {
        u64 begin, end;
    };
    std::vector<Span> spans;
    u64 open = 0;
    bool in_span = false;
    for (const auto& m : trace.markers) {
        if (m.id != marker_id)
            continue;
        if (m.begin) {
            open = m.step;
            in_span = true;
        } else if (in_span) {
            spans.push_back({open, m.step});
            in_span = false;
        }
    }
    if (spans.empty())
        fail("no marker spans with id ", unsigned(marker_id), " in trace");

    auto obs = trace.at(p_block);
    std::vector<int> bits;
    for (const auto& sp : spans) {
        const Tag* before = nullptr;
        const Tag* after = nullptr;
        for (const auto* o : obs) {
            if (o->step <= sp.begin)
                before = &o->tag;
            if (o->step <= sp.end)
                after = &o->tag;
        }
        if (!before || !after)
            fail("cswap target block has no observation before span");
        bits.push_back(*before != *after ? 1 : 0);
    }
    return bits;
}

struct Dictionary {
    std::map<Tag, Bytes> entries; // tag -> known 16-byte plaintext
};

struct DictionaryHit {
    u64 step;
    u64 addr;
    Bytes guess;
};

inline std::vector<DictionaryHit> dictionary_attack(const CiphertextTrace& trace,
                                                    u64 block_addr,
                                                    const Dictionary& dict) {
    if (dict.entries.empty())
        fail("dictionary attack needs a nonempty dictionary");
    std::vector<DictionaryHit> hits;
    for (const auto& o : trace.observations) {
        if (o.addr != block_addr)
            continue;
        auto it = dict.entries.find(o.tag);
        if (it != dict.entries.end())
            hits.push_back({o.step, o.addr, it->second});
    }
    return hits;
}

// Zero-mask inference hazard of the Fast variant: if a known-zero block
// shows the zero tag again right after an instrumented secret write, the
// fresh mask must have equalled the plaintext, so P != 0. The masks of the
// other variants may legitimately be zero, so no inference is possible
// there.
inline std::vector<u64> infer_nonzero_plaintext(const CiphertextTrace& trace,
                                                u64 block_addr, const Tag& zero_tag,
                                                Variant variant) {
    std::vector<u64> flagged_steps;
    if (variant != Variant::Fast)
        return flagged_steps;

    // steps covered by instrumented-site marker spans (ids 64..127)
    std::vector<std::pair<u64, u64>> spans;
    u64 open = 0;
    bool in_span = false;
    for (const auto& m : trace.markers) {
        if (m.id < 64)
            continue;
        if (m.begin) {
            open = m.step;
            in_span = true;
        } else if (in_span) {
            spans.push_back({open, m.step});
            in_span = false;
        }
    }
    bool seen_other = false;
    for (const auto& o : trace.observations) {
        if (o.addr != block_addr)
            continue;
        bool in_masked_span = false;
        for (const auto& sp : spans)
            if (o.step >= sp.first && o.step <= sp.second)
                in_masked_span = true;
        if (o.tag != zero_tag) {
            seen_other = true;
        } else if (seen_other && in_masked_span) {
            flagged_steps.push_back(o.step); // P != 0 inferred
        }
    }
    return flagged_steps;
}

// --- Trace file format -------------------------------------------------------
// Header: magic "MCTT", version, seed commitment, program hash, record count.
// Records are (step u64, addr u64, tag 16 bytes); marker records carry the
// top address bit plus id and begin flag, with a zero tag.

inline Bytes serialize_trace(const CiphertextTrace& tr) {
    Bytes out;
    out.insert(out.end(), {'M', 'C', 'T', 'T'});
    append_le(out, 1, 4);
    append_le(out, tr.seed_commitment, 8);
    append_le(out, tr.program_hash, 8);
    // interleave by step for a faithful single stream
    size_t oi = 0, mi = 0;
    u64 count = tr.observations.size() + tr.markers.size();
    append_le(out, count, 8);
    auto put_obs = [&](const Observation& o) {
        append_le(out, o.step, 8);
        append_le(out, o.addr, 8);
        out.insert(out.end(), o.tag.begin(), o.tag.end());
    };
    auto put_marker = [&](const MarkerRecord& m) {
        append_le(out, m.step, 8);
        append_le(out, MARKER_RECORD_FLAG | (u64(m.id) << 8) | (m.begin ? 1 : 0), 8);
        out.insert(out.end(), 16, 0);
    };
    while (oi < tr.observations.size() || mi < tr.markers.size()) {
        bool take_obs = mi >= tr.markers.size() ||
                        (oi < tr.observations.size() &&
                         tr.observations[oi].step <= tr.markers[mi].step);
        if (take_obs)
            put_obs(tr.observations[oi++]);
        else
            put_marker(tr.markers[mi++]);
    }
    return out;
}

inline CiphertextTrace deserialize_trace(const Bytes& in) {
    size_t pos = 0;
    auto need = [&](size_t n) {
        if (pos + n > in.size())
            fail("truncated ciphertext trace");
    };
    auto rd = [&](unsigned w) {
        need(w);
        u64 v = load_le(in.data() + pos, w);
        pos += w;
        return v;
    };
    need(4);
    if (!(in[0] == 'M' && in[1] == 'C' && in[2] == 'T' && in[3] == 'T'))
        fail("bad magic, not a ciphertext trace");
    pos = 4;
    if (rd(4) != 1)
        fail("unsupported trace version");
    CiphertextTrace tr;
    tr.seed_commitment = rd(8);
    tr.program_hash = rd(8);
    u64 count = rd(8);
    for (u64 i = 0; i < count; ++i) {
        u64 step = rd(8);
        u64 addr = rd(8);
        need(16);
        if (addr & MARKER_RECORD_FLAG) {
            tr.markers.push_back({step, u8((addr >> 8) & 0x7f), (addr & 1) != 0});
            pos += 16;
        } else {
            Observation o;
            o.step = step;
            o.addr = addr;
            std::copy(in.data() + pos, in.data() + pos + 16, o.tag.begin());
            pos += 16;
            tr.observations.push_back(o);
        }
    }
    return tr;
}

} // namespace cb
