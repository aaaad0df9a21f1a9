#pragma once

#include "objects.hpp"
#include "structure.hpp"

#include <json.hpp>

// The merged analysis artifact consumed by the rewriter: instruction secrecy
// classes, memory object tables, frame layouts, basic blocks and liveness.
//
// Instruction classes are lifted to location secrecy before they land here:
// an access counts as secret if its bytes were dynamically tainted or if it
// touched a location whose whole-lifetime secrecy is set (secret static or
// heap object, secret frame offset). The runtime planes carry exactly that
// whole-lifetime view, so only the lifted classes keep hardened programs
// decodable.

namespace cb {

struct AnalysisReport {
    u32 schema_version = 1;
    u64 program_hash = 0;
    ClassTable classes;
    ObjectReport objects;
    BasicBlockTable blocks;
    LivenessTable liveness;
    std::vector<std::string> warnings;

    Secrecy instr_class(u64 offset) const { return class_of(classes, offset); }
};

inline ClassTable lift_classes(const Program& prog, const std::vector<RunBundle>& runs,
                               const ObjectReport& final_rep) {
    ClassTable table;
    ObjectReport work = final_rep; // already carries merged secrecy
    std::map<std::vector<u64>, size_t> site_index;
    for (size_t i = 0; i < work.heap_sites.size(); ++i)
        site_index[work.heap_sites[i].call_stack] = i;
    std::vector<detail::SiteStats> stats(work.heap_sites.size());
    for (const auto& run : runs) {
        detail::ObjectReplay replay(prog, work, site_index, stats);
        replay.lift_cb = [&](const AccessRecord& ar, bool loc_secret) {
            InstrClass& c = table[ar.offset];
            if (ar.taint_mask != 0 || loc_secret) {
                ++c.secret_accesses;
                c.reads_secret |= !ar.is_write;
                c.writes_secret |= ar.is_write;
            } else {
                ++c.public_accesses;
            }
        };
        replay.run(run);
    }
    return table;
}

inline AnalysisReport analyze_program(const Program& prog,
                                      const std::vector<std::vector<Bytes>>& input_sets,
                                      const TaintSources& sources, u64 os_seed = 1) {
    TaintAnalysis ta = run_taint(prog, input_sets, sources, os_seed);
    AnalysisReport rep;
    rep.program_hash = prog.hash();
    rep.objects = analyze_objects(prog, ta.runs);
    rep.classes = lift_classes(prog, ta.runs, rep.objects);
    std::vector<ExecutionTrace> traces;
    for (const auto& r : ta.runs)
        traces.push_back(r.exec.trace);
    rep.blocks = find_basic_blocks(prog, traces);
    rep.liveness = compute_liveness(prog, traces);
    for (const auto& r : ta.runs)
        for (const auto& w : r.warnings)
            rep.warnings.push_back(w);
    for (const auto& w : rep.objects.warnings)
        rep.warnings.push_back(w);
    return rep;
}

// --- JSON serialization ----------------------------------------------------

inline nlohmann::json report_to_json(const AnalysisReport& rep) {
    nlohmann::json j;
    j["schema_version"] = rep.schema_version;
    j["program_hash"] = rep.program_hash;

    auto& classes = j["instruction_classes"] = nlohmann::json::array();
    for (const auto& [off, c] : rep.classes) {
        classes.push_back({{"offset", off},
                           {"secret_accesses", c.secret_accesses},
                           {"public_accesses", c.public_accesses},
                           {"reads_secret", c.reads_secret},
                           {"writes_secret", c.writes_secret}});
    }

    auto& statics = j["static_objects"] = nlohmann::json::array();
    for (const auto& so : rep.objects.statics)
        statics.push_back({{"base", so.base}, {"len", so.len}, {"secret", so.secret}});

    auto& sites = j["allocation_sites"] = nlohmann::json::array();
    for (const auto& s : rep.objects.heap_sites)
        sites.push_back({{"call_stack", s.call_stack},
                         {"secret", s.secret},
                         {"observed_sizes", s.observed_sizes}});

    j["tracked_calls"] = std::vector<u64>(rep.objects.tracked_calls.begin(),
                                          rep.objects.tracked_calls.end());
    j["flagged_calls"] = std::vector<u64>(rep.objects.flagged_calls.begin(),
                                          rep.objects.flagged_calls.end());

    auto& frames = j["frames"] = nlohmann::json::array();
    for (const auto& [fn, fl] : rep.objects.frames)
        frames.push_back({{"entry", fn},
                          {"frame_size", fl.frame_size},
                          {"secret_deltas",
                           std::vector<u64>(fl.secret_deltas.begin(), fl.secret_deltas.end())},
                          {"is_tail_target", fl.is_tail_target}});

    auto& blocks = j["basic_blocks"] = nlohmann::json::array();
    for (const auto& b : rep.blocks.blocks)
        blocks.push_back({{"start", b.start},
                          {"end", b.end},
                          {"successors", std::vector<u64>(b.successors.begin(), b.successors.end())}});
    j["coverage_gaps"] = rep.blocks.coverage_gaps;

    auto& live = j["liveness"] = nlohmann::json::array();
    for (const auto& [off, info] : rep.liveness.at)
        live.push_back({{"offset", off},
                        {"scratch_regs", info.scratch_regs},
                        {"scratch_before", info.scratch_before},
                        {"flags_live_after", info.flags_live_after},
                        {"flags_live_before", info.flags_live_before}});

    j["warnings"] = rep.warnings;
    j["unattributed"] = rep.objects.unattributed;
    return j;
}

inline AnalysisReport report_from_json(const nlohmann::json& j) {
    AnalysisReport rep;
    rep.schema_version = j.at("schema_version").get<u32>();
    if (rep.schema_version != 1)
        fail("unsupported report schema version ", rep.schema_version);
    rep.program_hash = j.at("program_hash").get<u64>();
    for (const auto& e : j.at("instruction_classes")) {
        InstrClass c;
        c.secret_accesses = e.at("secret_accesses").get<u64>();
        c.public_accesses = e.at("public_accesses").get<u64>();
        c.reads_secret = e.at("reads_secret").get<bool>();
        c.writes_secret = e.at("writes_secret").get<bool>();
        rep.classes[e.at("offset").get<u64>()] = c;
    }
    for (const auto& e : j.at("static_objects"))
        rep.objects.statics.push_back(
            {e.at("base").get<u64>(), e.at("len").get<u64>(), e.at("secret").get<bool>()});
    for (const auto& e : j.at("allocation_sites")) {
        AllocationSite s;
        s.call_stack = e.at("call_stack").get<std::vector<u64>>();
        s.secret = e.at("secret").get<bool>();
        s.observed_sizes = e.at("observed_sizes").get<std::vector<u64>>();
        rep.objects.heap_sites.push_back(std::move(s));
    }
    for (u64 c : j.at("tracked_calls").get<std::vector<u64>>())
        rep.objects.tracked_calls.insert(c);
    for (u64 c : j.at("flagged_calls").get<std::vector<u64>>())
        rep.objects.flagged_calls.insert(c);
    for (const auto& e : j.at("frames")) {
        FrameLayout fl;
        fl.entry_offset = e.at("entry").get<u64>();
        fl.frame_size = e.at("frame_size").get<u64>();
        for (u64 d : e.at("secret_deltas").get<std::vector<u64>>())
            fl.secret_deltas.insert(d);
        fl.is_tail_target = e.at("is_tail_target").get<bool>();
        rep.objects.frames[fl.entry_offset] = fl;
    }
    for (const auto& e : j.at("basic_blocks")) {
        BasicBlock b;
        b.start = e.at("start").get<u64>();
        b.end = e.at("end").get<u64>();
        for (u64 s : e.at("successors").get<std::vector<u64>>())
            b.successors.insert(s);
        rep.blocks.blocks.push_back(std::move(b));
    }
    rep.blocks.coverage_gaps = j.at("coverage_gaps").get<std::vector<u64>>();
    for (const auto& e : j.at("liveness")) {
        LivenessInfo info;
        info.scratch_regs = e.at("scratch_regs").get<u16>();
        info.scratch_before = e.at("scratch_before").get<u16>();
        info.flags_live_after = e.at("flags_live_after").get<bool>();
        info.flags_live_before = e.at("flags_live_before").get<bool>();
        info.observed = true;
        rep.liveness.at[e.at("offset").get<u64>()] = info;
    }
    rep.warnings = j.at("warnings").get<std::vector<std::string>>();
    rep.objects.unattributed = j.at("unattributed").get<std::vector<u64>>();
    return rep;
}

// Taint-source spec file: `input <index> secret|public` and `file <name>
// secret` lines. File sources are loaded by the CLI into input slots after
// the indexed inputs; the mapping is returned through `file_sources`.
inline TaintSources parse_sources(const std::string& text,
                                  std::vector<std::string>* file_sources = nullptr) {
    TaintSources out;
    std::istringstream is(text);
    std::string line;
    unsigned line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind) || kind[0] == '#' || kind[0] == ';')
            continue;
        if (kind == "input") {
            unsigned idx;
            std::string cls;
            if (!(ls >> idx >> cls) || (cls != "secret" && cls != "public"))
                fail("sources line ", line_no, ": expected 'input <index> secret|public'");
            if (cls == "secret")
                out.secret_inputs.insert(idx);
        } else if (kind == "file") {
            std::string name, cls;
            if (!(ls >> name >> cls) || cls != "secret")
                fail("sources line ", line_no, ": expected 'file <name> secret'");
            if (file_sources)
                file_sources->push_back(name);
        } else {
            fail("sources line ", line_no, ": unknown directive '", kind, "'");
        }
    }
    return out;
}

} // namespace cb
