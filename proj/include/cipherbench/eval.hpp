#pragma once

#include "attack.hpp"
#include "rewriter.hpp"

#include <cmath>

// Evaluation harness: aligns original and hardened runs via the site
// markers, counts remaining ciphertext collisions on secret writes, checks
// plane consistency, and measures instruction-count overhead.

namespace cb {

// One original secret-write event matched to its instrumented marker span.
struct AlignedWrite {
    u64 orig_offset = 0;
    u64 addr = 0;
    u8 width = 0;
    u8 secret_mask = 0; // dynamically tainted bytes of the original write
    u8 site_id = 0;
    u64 begin_step = 0, end_step = 0;
    u64 span_ordinal = 0; // 1-based chronological index of the owning span
    Bytes expected; // original memory content of [addr, addr+width) after the write
};

struct AlignedTracePair {
    std::vector<AlignedWrite> writes;
    u64 spans_total = 0;
    u64 matched_occurrences = 0;
};

// Site-id spans (ids 64..127) in chronological order.
inline std::vector<std::tuple<u8, u64, u64>> site_spans(const CiphertextTrace& tr) {
    std::vector<std::tuple<u8, u64, u64>> spans;
    u64 open = 0;
    u8 open_id = 0;
    bool in_span = false;
    for (const auto& m : tr.markers) {
        if (m.id < 64)
            continue;
        if (m.begin) {
            open = m.step;
            open_id = m.id;
            in_span = true;
        } else if (in_span && m.id == open_id) {
            spans.emplace_back(open_id, open, m.step);
            in_span = false;
        }
    }
    return spans;
}

// Matches the k-th dynamic execution of each instrumented original
// instruction with the k-th span of its site id. Both runs must have used
// identical inputs.
inline AlignedTracePair align_traces(const Program& prog, const RunBundle& original,
                                     const Program& hardened,
                                     const CiphertextTrace& ciphertext) {
    if (!hardened.hardened)
        fail("alignment needs a hardened program");
    if (hardened.meta.original_hash != prog.hash())
        fail("hardened program was built from a different binary");

    // offset -> site id table from the hardened container
    std::map<u64, u8> site_of;
    for (const auto& [off, id] : hardened.site_map)
        site_of[off] = id;

    auto spans = site_spans(ciphertext);

    // original occurrences of instrumented instructions, in trace order,
    // with their write records and a replayed memory image
    struct Occurrence {
        u64 offset;
        u8 site_id;
        std::vector<AlignedWrite> writes;
    };
    std::vector<Occurrence> occurrences;
    SparseMemory image;
    for (const auto& [addr, bytes] : prog.statics)
        image.write_block(addr, bytes.data(), bytes.size());

    size_t ti = 0;
    const auto& taints = original.accesses;
    for (const auto& ev : original.exec.trace.events) {
        if (ev.kind == Ev::Exec) {
            auto it = site_of.find(ev.offset);
            if (it != site_of.end())
                occurrences.push_back({ev.offset, it->second, {}});
            continue;
        }
        if (ev.kind == Ev::Realloc) {
            // mirror the allocator's raw move in the replayed image
            u64 n = detail::Allocator::round_size(ev.c);
            Bytes data = image.read_block(ev.a, n);
            image.write_block(ev.b, data.data(), n);
            continue;
        }
        if (ev.kind != Ev::MemRead && ev.kind != Ev::MemWrite)
            continue;
        if (ti >= taints.size())
            fail("alignment: taint records out of step");
        const AccessRecord& ar = taints[ti++];
        if (ev.kind == Ev::MemWrite) {
            image.write(ev.a, ev.b, ev.width);
            if (!occurrences.empty() && occurrences.back().offset == ev.offset &&
                site_of.count(ev.offset)) {
                AlignedWrite w;
                w.orig_offset = ev.offset;
                w.addr = ev.a;
                w.width = ev.width;
                w.secret_mask = ar.taint_mask;
                w.expected = image.read_block(ev.a, ev.width);
                occurrences.back().writes.push_back(w);
            }
        }
    }

    if (occurrences.size() != spans.size()) {
        u64 first = occurrences.size() < spans.size()
                        ? std::get<0>(spans[occurrences.size()])
                        : occurrences[spans.size()].offset;
        fail("marker mismatch: ", occurrences.size(), " instrumented occurrences vs ",
             spans.size(), " spans; first divergence near ", hex(first));
    }
    AlignedTracePair out;
    out.spans_total = spans.size();
    for (size_t i = 0; i < occurrences.size(); ++i) {
        auto [id, begin, end] = spans[i];
        if (id != occurrences[i].site_id)
            fail("marker mismatch at occurrence ", i, ": site ",
                 unsigned(occurrences[i].site_id), " vs span ", unsigned(id),
                 " (offset ", hex(occurrences[i].offset), ")");
        ++out.matched_occurrences;
        for (AlignedWrite w : occurrences[i].writes) {
            w.site_id = id;
            w.begin_step = begin;
            w.end_step = end;
            w.span_ordinal = i + 1;
            out.writes.push_back(std::move(w));
        }
    }
    return out;
}

struct CollisionReport {
    u64 total = 0;
    std::map<u64, u64> by_block;    // block address -> collision count
    std::map<unsigned, u64> by_width; // original write width -> count
    u64 secret_writes = 0;
};

// A collision is a secret write whose resulting tag repeats an earlier tag
// at the same block address, in the data plane or the mask plane.
inline CollisionReport count_collisions(const AlignedTracePair& aligned,
                                        const CiphertextTrace& ciphertext) {
    CollisionReport rep;

    // blocks of interest per aligned secret write: data and mask planes
    struct Window {
        u64 begin, end;
        unsigned width;
        std::set<u64> blocks;
    };
    std::vector<Window> windows;
    for (const auto& w : aligned.writes) {
        if (w.secret_mask == 0)
            continue;
        ++rep.secret_writes;
        Window win;
        win.begin = w.begin_step;
        win.end = w.end_step;
        win.width = w.width;
        u64 lo = layout::align_down(w.addr, BLOCK);
        u64 hi = layout::align_down(w.addr + w.width - 1, BLOCK);
        for (u64 b = lo; b <= hi; b += BLOCK) {
            win.blocks.insert(b);
            win.blocks.insert(b + layout::D_MASK);
        }
        // the mask plane of an unaligned write can straddle one block more
        u64 mlo = layout::align_down(w.addr + layout::D_MASK, BLOCK);
        u64 mhi = layout::align_down(w.addr + layout::D_MASK + w.width - 1, BLOCK);
        for (u64 b = mlo; b <= mhi; b += BLOCK)
            win.blocks.insert(b);
        windows.push_back(std::move(win));
    }

    std::map<u64, std::set<Tag>> history;
    for (const auto& o : ciphertext.observations) {
        bool counted = false;
        for (const auto& win : windows) {
            if (o.step >= win.begin && o.step <= win.end && win.blocks.count(o.addr)) {
                if (history[o.addr].count(o.tag)) {
                    ++rep.total;
                    ++rep.by_block[o.addr];
                    ++rep.by_width[win.width];
                }
                counted = true;
                break;
            }
        }
        (void)counted;
        history[o.addr].insert(o.tag);
    }
    return rep;
}

// First write index (1-based, per block) at which a tag repeat occurs; 0 if
// none. Used for the byte-fill hazard measurement.
inline u64 first_collision_index(const CiphertextTrace& tr, u64 block_addr) {
    std::set<Tag> seen;
    u64 index = 0;
    for (const auto& o : tr.observations) {
        if (o.addr != block_addr)
            continue;
        ++index;
        if (seen.count(o.tag))
            return index;
        seen.insert(o.tag);
    }
    return 0;
}

struct OverheadRecord {
    u64 original_cost = 0;
    u64 hardened_cost = 0;
    double factor() const {
        return original_cost ? double(hardened_cost) / double(original_cost) : 0.0;
    }
};

inline double geometric_mean(const std::vector<double>& xs) {
    if (xs.empty())
        return 0.0;
    double acc = 0.0;
    for (double x : xs)
        acc += std::log(x);
    return std::exp(acc / double(xs.size()));
}

// Instruction-cost overhead of one hardened run vs the original under
// identical inputs. Costs are the interpreter's fuel units.
inline OverheadRecord measure_overhead_once(const Program& orig, const Program& hard,
                                            const std::vector<Bytes>& inputs,
                                            u64 os_seed, u64 fuel = 200'000'000) {
    ExecOptions opts;
    opts.inputs = inputs;
    opts.os_seed = os_seed;
    opts.fuel = fuel;
    opts.record_trace = false;
    auto a = execute(orig, opts);
    auto b = execute(hard, opts);
    if (!a.ok() || !b.ok())
        fail("overhead run did not halt cleanly (", fault_name(a.fault), " / ",
             fault_name(b.fault), ")");
    return {a.fuel_used, b.fuel_used};
}

// Decodes one byte of hardened memory per the variant's formula.
inline u8 decode_plane_byte(const SparseMemory& mem, u64 addr, Variant v) {
    u8 data = mem.read_byte(addr);
    u8 mask = mem.read_byte(addr + layout::D_MASK);
    if (v == Variant::Fast)
        return u8(data ^ mask);
    u8 sec = mem.read_byte(addr + layout::D_SECRECY);
    return u8(data ^ (mask & sec));
}

struct PlaneCheckResult {
    u64 checked = 0;
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

// Re-runs the hardened program and, at the end marker of every aligned
// span, decodes the bytes the original write produced and compares them
// with the original run's memory at the same point.
inline PlaneCheckResult verify_plane_consistency(const Program& hardened,
                                                 const AlignedTracePair& aligned,
                                                 const std::vector<Bytes>& inputs,
                                                 u64 os_seed) {
    PlaneCheckResult out;
    std::map<u64, std::vector<const AlignedWrite*>> by_ordinal;
    for (const auto& w : aligned.writes)
        by_ordinal[w.span_ordinal].push_back(&w);

    u64 seen_end_markers = 0;
    Variant v = hardened.meta.variant;

    Hooks hooks;
    hooks.post_instruction = [&](const Instruction& in, u64, MachineState& st) {
        if (in.op != Op::Marker || (in.aux & 0x80) || (in.aux & 0x7f) < 64)
            return;
        ++seen_end_markers;
        auto it = by_ordinal.find(seen_end_markers);
        if (it == by_ordinal.end())
            return;
        for (const AlignedWrite* w : it->second) {
            for (unsigned i = 0; i < w->width; ++i) {
                u8 got = decode_plane_byte(st.mem, w->addr + i, v);
                u8 want = w->expected[i];
                if (got != want)
                    out.failures.push_back(strf("byte ", hex(w->addr + i), " decodes to ",
                                                unsigned(got), ", original wrote ",
                                                unsigned(want), " (site ",
                                                unsigned(w->site_id), ")"));
                ++out.checked;
            }
        }
    };

    ExecOptions opts;
    opts.inputs = inputs;
    opts.os_seed = os_seed;
    opts.fuel = 200'000'000;
    opts.record_trace = false;
    auto r = execute(hardened, opts, &hooks);
    if (!r.ok())
        out.failures.push_back(strf("hardened run faulted: ", fault_name(r.fault)));
    return out;
}

} // namespace cb
