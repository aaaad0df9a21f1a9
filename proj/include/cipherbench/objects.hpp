#pragma once

#include "taint.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <set>

// Turns raw tainted addresses into named memory objects: contiguous static
// blocks, heap objects keyed by their allocation call stack, and per-function
// stack frames with secret offsets. Works by replaying recorded runs with a
// simulated stack pointer.

namespace cb {

struct StaticObject {
    u64 base = 0;
    u64 len = 0;
    bool secret = false;
};

struct AllocationSite {
    std::vector<u64> call_stack; // call offsets, outermost first, ending at the
                                 // alloc/realloc instruction itself
    bool secret = false;
    std::vector<u64> observed_sizes;
};

struct FrameLayout {
    u64 entry_offset = 0;
    u64 frame_size = 0;
    std::set<u64> secret_deltas; // tainted byte at entry_sp - delta, delta >= 1
    bool is_tail_target = false;
};

struct ObjectReport {
    std::vector<StaticObject> statics;
    std::vector<AllocationSite> heap_sites;
    std::set<u64> tracked_calls; // call/alloc offsets appearing in any stack
    std::set<u64> flagged_calls; // subset leading to >= 1 secret allocation
    std::map<u64, FrameLayout> frames;
    std::vector<std::string> warnings;
    std::vector<u64> unattributed; // tainted bytes without an owner
};

// One analysis run: execution trace plus taint access records.
using RunBundle = TaintRunResult;

// Whether a statics-region byte belongs to a secret object in `rep`.
inline bool static_secret(const ObjectReport& rep, u64 addr) {
    for (const auto& so : rep.statics)
        if (addr >= so.base && addr < so.base + so.len)
            return so.secret;
    return false;
}

// Owner of one tainted byte, for the partition check and location lifting.
enum class OwnerKind : u8 { None, Static, Heap, Frame };

class TraceAnomaly : public Error {
public:
    TraceAnomaly(u64 offset, const std::string& msg)
        : Error(strf("trace anomaly at ", hex(offset), ": ", msg)), offset(offset) {}
    u64 offset;
};

namespace detail {

struct FrameInst {
    u64 func = 0;     // function entry offset
    u64 entry_sp = 0; // sp at entry (points at the return address slot)
};

struct LiveObj {
    u64 base = 0;
    u64 size = 0;
    size_t site_id = 0;
    bool tainted = false;
};

struct SiteStats {
    u64 secret_instances = 0;
    u64 public_instances = 0;
    bool multi_in_run = false; // same call stack hit twice within one run
};

// Per-run replay that drives all object analyses.
class ObjectReplay {
public:
    ObjectReplay(const Program& prog, ObjectReport& rep,
                 std::map<std::vector<u64>, size_t>& site_index,
                 std::vector<SiteStats>& stats)
        : prog_(prog), rep_(rep), site_index_(site_index), stats_(stats) {}

    // When set, receives every non-structural access together with whether
    // any touched byte belongs to a location `rep` marks secret. Used for
    // lifting instruction classes to whole-lifetime location secrecy.
    std::function<void(const AccessRecord&, bool)> lift_cb;

    void run(const RunBundle& bundle) {
        const auto& events = bundle.exec.trace.events;
        const auto& taints = bundle.accesses;

        // pass 1: function entries = call targets plus the program entry
        entries_.insert(prog_.entry);
        for (const auto& ev : events)
            if (ev.kind == Ev::Call)
                entries_.insert(ev.b);

        sp_ = layout::STACK_TOP;
        frames_.clear();
        frames_.push_back({prog_.entry, sp_});
        touch_frame(prog_.entry);

        size_t ti = 0; // cursor into taint access records
        u64 last_offset = prog_.entry;
        for (size_t i = 0; i < events.size(); ++i) {
            const TraceEvent& ev = events[i];
            switch (ev.kind) {
            case Ev::Exec:
                last_offset = ev.offset;
                step_sp(ev.offset);
                break;
            case Ev::MemRead:
            case Ev::MemWrite: {
                if (ti >= taints.size())
                    throw TraceAnomaly(ev.offset, "memory event without taint record");
                const AccessRecord& ar = taints[ti++];
                if (ar.addr != ev.a || ar.width != ev.width)
                    throw TraceAnomaly(ev.offset, "taint record out of step with trace");
                on_access(ar);
                break;
            }
            case Ev::Call: {
                // sp already reflects the pushed return address (step_sp ran)
                frames_.push_back({ev.b, sp_});
                touch_frame(ev.b);
                call_sites_.push_back(ev.a);
                break;
            }
            case Ev::Ret:
                if (frames_.size() <= 1)
                    throw TraceAnomaly(ev.offset, "return with empty call stack");
                frames_.pop_back();
                if (!call_sites_.empty())
                    call_sites_.pop_back();
                break;
            case Ev::Alloc:
                on_alloc(ev.offset, ev.b, detail::Allocator::round_size(ev.a), ev.a);
                break;
            case Ev::Free:
                close_object(ev.a);
                break;
            case Ev::Realloc:
                on_realloc(ev.offset, ev.a, ev.b, ev.c);
                break;
            case Ev::Classify:
                for (u64 a = ev.a; a < ev.a + ev.b; ++a)
                    mark_secret_byte(a, ev.offset);
                break;
            case Ev::Brk:
            case Ev::Declassify:
            case Ev::Marker:
                break;
            }
        }
        (void)last_offset;
        for (auto& lo : live_)
            finish_instance(lo.second);
        live_.clear();
        run_counts_.clear();
    }

    // contiguous grouping over all runs happens in finalize()
    std::map<u64, bool>& static_bytes() { return static_bytes_; }

private:
    void step_sp(u64 offset) {
        const Instruction& in = decode_at(offset);
        // Tail call: unconditional jump to a known function entry while the
        // current frame is fully popped.
        if ((in.op == Op::Jmp || in.op == Op::Jmps) && !frames_.empty()) {
            u64 target = branch_target(in, offset);
            if (entries_.count(target) && sp_ == frames_.back().entry_sp &&
                frames_.back().func != target) {
                frames_.back() = {target, sp_};
                touch_frame(target);
                rep_.frames[target].is_tail_target = true;
                entries_.insert(target);
                return;
            }
        }
        switch (in.op) {
        case Op::Push:
            sp_ -= 8;
            grow_current_frame();
            break;
        case Op::Call:
            sp_ -= 8;
            break;
        case Op::Pop:
            if (in.rd == SP)
                throw TraceAnomaly(offset, "pop into the stack pointer");
            sp_ += 8;
            break;
        case Op::Ret:
            sp_ += 8;
            break;
        case Op::AddRI:
            if (in.rd == SP)
                sp_ += u64(i64(i8(in.aux)));
            break;
        case Op::SubRI:
            if (in.rd == SP) {
                sp_ -= u64(i64(i8(in.aux)));
                grow_current_frame();
            }
            break;
        default: {
            RegUse use = reg_use(in);
            if (use.writes & (u16(1) << SP))
                throw TraceAnomaly(offset, strf("non-canonical stack pointer update (",
                                                op_name(in.op), ")"));
            break;
        }
        }
    }

    void grow_current_frame() {
        FrameInst& f = frames_.back();
        FrameLayout& fl = rep_.frames[f.func];
        if (f.entry_sp > sp_)
            fl.frame_size = std::max(fl.frame_size, f.entry_sp - sp_);
    }

    void touch_frame(u64 func) {
        FrameLayout& fl = rep_.frames[func];
        fl.entry_offset = func;
    }

    void on_access(const AccessRecord& ar) {
        bool loc_secret = false;
        for (unsigned i = 0; i < ar.width; ++i) {
            u64 a = ar.addr + i;
            bool tainted = (ar.taint_mask >> i) & 1;
            if (a >= layout::STATIC_BASE && a < layout::STATIC_LIMIT) {
                auto [it, fresh] = static_bytes_.try_emplace(a, false);
                it->second |= tainted;
                (void)fresh;
                if (lift_cb && static_secret(rep_, a))
                    loc_secret = true;
            } else if (a >= layout::HEAP_BASE && a < layout::HEAP_LIMIT) {
                if (tainted)
                    mark_heap_byte(a, ar.offset);
                if (lift_cb) {
                    LiveObj* obj = find_live(a);
                    if (obj && rep_.heap_sites[obj->site_id].secret)
                        loc_secret = true;
                }
            } else if (a >= layout::STACK_GUARD_BASE && a < layout::STACK_TOP) {
                loc_secret |= on_stack_access(a, tainted, ar.offset);
            } else if (tainted) {
                rep_.unattributed.push_back(a);
            }
        }
        if (lift_cb && !ar.structural)
            lift_cb(ar, loc_secret);
    }

    // returns whether the byte sits at a secret offset of its owning frame
    bool on_stack_access(u64 addr, bool tainted, u64 offset) {
        // innermost frame whose entry_sp lies above the address owns it
        for (size_t i = frames_.size(); i-- > 0;) {
            if (frames_[i].entry_sp > addr) {
                FrameLayout& fl = rep_.frames[frames_[i].func];
                u64 delta = frames_[i].entry_sp - addr;
                fl.frame_size = std::max(fl.frame_size, delta);
                if (tainted)
                    fl.secret_deltas.insert(delta);
                return fl.secret_deltas.count(delta) != 0;
            }
        }
        if (tainted)
            rep_.unattributed.push_back(addr);
        (void)offset;
        return false;
    }

    void mark_secret_byte(u64 a, u64 offset) {
        if (a >= layout::STATIC_BASE && a < layout::STATIC_LIMIT) {
            static_bytes_[a] = true;
        } else if (a >= layout::HEAP_BASE && a < layout::HEAP_LIMIT) {
            mark_heap_byte(a, offset);
        } else if (a >= layout::STACK_GUARD_BASE && a < layout::STACK_TOP) {
            on_stack_access(a, true, offset);
        } else {
            rep_.unattributed.push_back(a);
        }
    }

    void mark_heap_byte(u64 a, u64 offset) {
        LiveObj* obj = find_live(a);
        if (!obj) {
            rep_.unattributed.push_back(a);
            return;
        }
        obj->tainted = true;
        rep_.heap_sites[obj->site_id].secret = true;
        (void)offset;
    }

    LiveObj* find_live(u64 a) {
        auto it = live_.upper_bound(a);
        if (it == live_.begin())
            return nullptr;
        --it;
        if (a < it->second.base + it->second.size)
            return &it->second;
        return nullptr;
    }

    std::vector<u64> current_stack(u64 alloc_offset) const {
        std::vector<u64> s = call_sites_;
        s.push_back(alloc_offset);
        return s;
    }

    void on_alloc(u64 offset, u64 ptr, u64 rounded, u64 requested) {
        std::vector<u64> stack = current_stack(offset);
        size_t id;
        auto it = site_index_.find(stack);
        if (it == site_index_.end()) {
            id = rep_.heap_sites.size();
            site_index_.emplace(stack, id);
            AllocationSite site;
            site.call_stack = stack;
            rep_.heap_sites.push_back(std::move(site));
            stats_.push_back({});
        } else {
            id = it->second;
        }
        AllocationSite& site = rep_.heap_sites[id];
        site.observed_sizes.push_back(requested);
        if (live_.count(ptr))
            throw TraceAnomaly(offset, "allocation over a live object");
        if (++run_counts_[id] > 1)
            stats_[id].multi_in_run = true;
        live_[ptr] = {ptr, rounded, id, false};
    }

    void on_realloc(u64 offset, u64 old_ptr, u64 new_ptr, u64 requested) {
        bool old_secret = false;
        if (old_ptr != 0) {
            LiveObj* old_obj = find_live(old_ptr);
            if (!old_obj || old_obj->base != old_ptr)
                throw TraceAnomaly(offset, "realloc of unknown object");
            old_secret = rep_.heap_sites[old_obj->site_id].secret;
            close_object(old_ptr);
        }
        on_alloc(offset, new_ptr, detail::Allocator::round_size(requested), requested);
        if (old_secret) {
            // moved contents stay secret; the new site inherits
            LiveObj* nobj = find_live(new_ptr);
            nobj->tainted = true;
            rep_.heap_sites[nobj->site_id].secret = true;
        }
    }

    void close_object(u64 ptr) {
        auto it = live_.find(ptr);
        if (it == live_.end())
            return;
        finish_instance(it->second);
        live_.erase(it);
    }

    void finish_instance(const LiveObj& obj) {
        if (obj.tainted)
            ++stats_[obj.site_id].secret_instances;
        else
            ++stats_[obj.site_id].public_instances;
    }

    const Instruction& decode_at(u64 offset) {
        auto it = icache_.find(offset);
        if (it != icache_.end())
            return it->second;
        u64 rem = 0;
        const u8* p = prog_.code_at(offset, &rem);
        if (!p)
            throw TraceAnomaly(offset, "executed offset outside code");
        auto in = decode(std::span<const u8>(p, rem), 0);
        if (!in)
            throw TraceAnomaly(offset, "undecodable executed instruction");
        return icache_.emplace(offset, *in).first->second;
    }

    const Program& prog_;
    ObjectReport& rep_;
    std::map<std::vector<u64>, size_t>& site_index_;
    std::vector<SiteStats>& stats_;
    std::set<u64> entries_;
    std::vector<FrameInst> frames_;
    std::vector<u64> call_sites_;
    std::map<u64, LiveObj> live_;
    std::map<u64, size_t> run_counts_;
    std::map<u64, bool> static_bytes_;
    std::unordered_map<u64, Instruction> icache_;
    u64 sp_ = 0;
};

} // namespace detail

// Full object analysis over a set of runs of the same program.
inline ObjectReport analyze_objects(const Program& prog, const std::vector<RunBundle>& runs) {
    ObjectReport rep;
    std::map<std::vector<u64>, size_t> site_index;
    std::vector<detail::SiteStats> stats;
    std::map<u64, bool> static_bytes;
    for (const auto& run : runs) {
        detail::ObjectReplay replay(prog, rep, site_index, stats);
        replay.run(run);
        for (auto& [a, t] : replay.static_bytes()) {
            auto [it, fresh] = static_bytes.try_emplace(a, false);
            it->second |= t;
            (void)fresh;
        }
    }
    // group accessed static bytes into maximal contiguous blocks
    u64 start = 0, prev = 0;
    bool open = false, secret = false;
    auto flush = [&] {
        if (open)
            rep.statics.push_back({start, prev - start + 1, secret});
        open = false;
        secret = false;
    };
    for (const auto& [a, t] : static_bytes) {
        if (!open) {
            open = true;
            start = a;
        } else if (a != prev + 1) {
            flush();
            open = true;
            start = a;
        }
        prev = a;
        secret |= t;
    }
    flush();

    // call tracking and loop-conflict warnings over the final site table
    for (size_t id = 0; id < rep.heap_sites.size(); ++id) {
        AllocationSite& site = rep.heap_sites[id];
        for (u64 c : site.call_stack) {
            rep.tracked_calls.insert(c);
            if (site.secret)
                rep.flagged_calls.insert(c);
        }
        if (stats[id].multi_in_run && stats[id].secret_instances > 0 &&
            stats[id].public_instances > 0) {
            rep.warnings.push_back(
                strf("allocation loop at ", hex(site.call_stack.back()),
                     " produced one call stack with mixed secrecy; merged as secret"));
        }
    }

    std::sort(rep.unattributed.begin(), rep.unattributed.end());
    rep.unattributed.erase(std::unique(rep.unattributed.begin(), rep.unattributed.end()),
                           rep.unattributed.end());
    return rep;
}

inline std::vector<StaticObject> identify_static_objects(const Program& prog,
                                                         const std::vector<RunBundle>& runs) {
    return analyze_objects(prog, runs).statics;
}

inline ObjectReport track_heap(const Program& prog, const std::vector<RunBundle>& runs) {
    return analyze_objects(prog, runs);
}

inline std::map<u64, FrameLayout> track_stack_frames(const Program& prog,
                                                     const std::vector<RunBundle>& runs) {
    return analyze_objects(prog, runs).frames;
}

} // namespace cb
