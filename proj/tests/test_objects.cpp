#include "cipherbench/objects.hpp"
#include "support/corpus.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace cb;

namespace {

std::vector<RunBundle> analyze(const Program& p, std::vector<std::vector<Bytes>> input_sets = {{}},
                               TaintSources sources = {}) {
    std::vector<RunBundle> out;
    for (size_t i = 0; i < input_sets.size(); ++i) {
        auto r = run_taint_once(p, input_sets[i], sources, i + 1);
        REQUIRE(!r.rejected);
        REQUIRE(r.exec.ok());
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace

TEST_CASE("gap in accessed statics splits objects") {
    std::string src =
        "mov r1, 0x100000\n"
        "load r2, q[r1+0]\n"
        "load r3, q[r1+16]\n"
        "halt\n"
        ".static 0x100000 zero 32\n";
    Program p = assemble(src);
    auto runs = analyze(p);
    auto statics = identify_static_objects(p, runs);
    REQUIRE(statics.size() == 2);
    CHECK(statics[0].base == 0x100000);
    CHECK(statics[0].len == 8);
    CHECK(statics[1].base == 0x100010);
    CHECK(statics[1].len == 8);
    CHECK(!statics[0].secret);
    CHECK(!statics[1].secret);
}

TEST_CASE("one tainted byte marks the whole contiguous block secret") {
    std::string src =
        "mov r1, 0x100000\n"
        "load r2, q[r1+0]\n"   // touch 8 bytes as one block
        "mov r3, 1\n"
        "mov r4, 0x100003\n"
        "classify r4, r3\n"    // one byte inside
        "load r5, b[r4+0]\n"
        "halt\n"
        ".static 0x100000 zero 8\n";
    Program p = assemble(src);
    auto statics = identify_static_objects(p, analyze(p));
    REQUIRE(statics.size() == 1);
    CHECK(statics[0].base == 0x100000);
    CHECK(statics[0].len == 8);
    CHECK(statics[0].secret);
}

TEST_CASE("untouched statics are absent from the object list") {
    std::string src =
        "mov r1, 0x100000\n"
        "load r2, q[r1+0]\n"
        "halt\n"
        ".static 0x100000 zero 8\n"
        ".static 0x100100 zero 64\n"; // never accessed
    Program p = assemble(src);
    auto statics = identify_static_objects(p, analyze(p));
    REQUIRE(statics.size() == 1);
    CHECK(statics[0].base == 0x100000);
}

namespace {

// Three allocation sites through a shared helper, middle one secret:
// main -> f1 -> helper -> alloc      (public)
// main -> f2 -> helper -> alloc      (secret)
// main -> helper -> alloc            (public)
std::string fig5_program() {
    return
        "main:\n"
        "    mov r0, 16\n"
        "    call f1\n"
        "    call f2\n"
        "    call helper\n"
        "    halt\n"
        "f1:\n"
        "    call helper\n"
        "    ret\n"
        "f2:\n"
        "    call helper\n"
        "    mov r3, 8\n"
        "    classify r2, r3\n"      // taint the object f2 got back
        "    mov r4, 0x5a\n"
        "    store q[r2+0], r4\n"
        "    ret\n"
        "helper:\n"
        "    alloc r2, r0\n"
        "    ret\n";
}

} // namespace

TEST_CASE("allocation call stacks: shared helper, one secret path") {
    Program p = assemble(fig5_program());
    auto runs = analyze(p);
    auto rep = track_heap(p, runs);

    REQUIRE(rep.heap_sites.size() == 3);
    unsigned secret_count = 0;
    const AllocationSite* secret_site = nullptr;
    for (const auto& s : rep.heap_sites) {
        if (s.secret) {
            ++secret_count;
            secret_site = &s;
        }
    }
    REQUIRE(secret_count == 1);
    // secret path: call f2, call helper (inside f2), alloc
    REQUIRE(secret_site->call_stack.size() == 3);
    u64 call_f2 = p.symbols.at("main") + 10 + 5; // mov(10) call(5) -> second call
    CHECK(secret_site->call_stack[0] == call_f2);

    // every call on the secret path is flagged, the others are tracked only
    for (u64 c : secret_site->call_stack)
        CHECK(rep.flagged_calls.count(c) == 1);
    for (const auto& s : rep.heap_sites)
        for (u64 c : s.call_stack)
            CHECK(rep.tracked_calls.count(c) == 1);
    // the public-only paths must not be fully flagged
    for (const auto& s : rep.heap_sites) {
        if (s.secret)
            continue;
        bool all_flagged = true;
        for (u64 c : s.call_stack)
            all_flagged = all_flagged && rep.flagged_calls.count(c) == 1;
        CHECK(!all_flagged);
    }
}

TEST_CASE("depth-0 allocation still has a nonempty stack") {
    std::string src =
        "mov r0, 32\n"
        "alloc r1, r0\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "halt\n";
    Program p = assemble(src);
    auto rep = track_heap(p, analyze(p));
    REQUIRE(rep.heap_sites.size() == 1);
    REQUIRE(rep.heap_sites[0].call_stack.size() == 1); // just the alloc itself
    CHECK(rep.heap_sites[0].secret);
    CHECK(rep.tracked_calls.count(rep.heap_sites[0].call_stack[0]) == 1);
}

TEST_CASE("same wrapper from two parents yields two distinct sites") {
    std::string src =
        "main:\n"
        "    mov r0, 16\n"
        "    call a\n"
        "    call b\n"
        "    halt\n"
        "a:\n"
        "    call wrap\n"
        "    ret\n"
        "b:\n"
        "    call wrap\n"
        "    ret\n"
        "wrap:\n"
        "    alloc r2, r0\n"
        "    ret\n";
    Program p = assemble(src);
    auto rep = track_heap(p, analyze(p));
    CHECK(rep.heap_sites.size() == 2);
}

TEST_CASE("loop allocation with conflicting secrecy merges secret with warning") {
    std::string src =
        "    mov r0, 16\n"
        "    mov r5, 2\n"
        "loop:\n"
        "    alloc r2, r0\n"
        "    cmp r5, 2\n"
        "    jnz skip\n"
        "    mov r3, 8\n"
        "    classify r2, r3\n"   // only the first iteration's object is secret
        "skip:\n"
        "    sub r5, 1\n"
        "    jnz loop\n"
        "    halt\n";
    Program p = assemble(src);
    auto rep = track_heap(p, analyze(p));
    REQUIRE(rep.heap_sites.size() == 1);
    CHECK(rep.heap_sites[0].secret);
    REQUIRE(rep.warnings.size() == 1);
    CHECK(rep.warnings[0].find("loop") != std::string::npos);
}

TEST_CASE("push and sub on sp grow the frame to at least 40 bytes") {
    std::string src =
        "main:\n"
        "    call fn\n"
        "    halt\n"
        "fn:\n"
        "    push r1\n"
        "    sub sp, 32\n"
        "    add sp, 32\n"
        "    pop r1\n"
        "    ret\n";
    Program p = assemble(src);
    auto frames = track_stack_frames(p, analyze(p));
    REQUIRE(frames.count(p.symbols.at("fn")));
    CHECK(frames.at(p.symbols.at("fn")).frame_size >= 40);
}

TEST_CASE("tainted byte below the entry pointer lands in secret offsets") {
    std::string src =
        "main:\n"
        "    mov r1, 0x100000\n"
        "    mov r2, 1\n"
        "    classify r1, r2\n"
        "    load r0, b[r1+0]\n"
        "    call fn\n"
        "    halt\n"
        "fn:\n"
        "    sub sp, 32\n"
        "    store b[sp+8], r0\n" // entry_sp - 24
        "    add sp, 32\n"
        "    ret\n"
        ".static 0x100000 07\n";
    Program p = assemble(src);
    auto frames = track_stack_frames(p, analyze(p));
    const FrameLayout& fl = frames.at(p.symbols.at("fn"));
    CHECK(fl.frame_size >= 32);
    CHECK(fl.secret_deltas.count(24) == 1);
}

TEST_CASE("leaf reached only by jmp from a popped caller is a tail target") {
    // leaf becomes a known entry through the direct call; outer reaches it
    // only via jmp with its frame fully popped.
    std::string full =
        "main:\n"
        "    call leaf\n"
        "    call outer\n"
        "    halt\n"
        "outer:\n"
        "    sub sp, 16\n"
        "    add sp, 16\n"
        "    jmp leaf\n"
        "leaf:\n"
        "    mov r1, 1\n"
        "    ret\n";
    Program pf = assemble(full);
    auto frames = track_stack_frames(pf, analyze(pf));
    REQUIRE(frames.count(pf.symbols.at("leaf")));
    CHECK(frames.at(pf.symbols.at("leaf")).is_tail_target);
    // the ret from leaf returned to outer's caller with no anomaly
}

TEST_CASE("every tainted byte is attributed: empty unattributed set") {
    std::string src =
        "main:\n"
        "    mov r1, 0x100000\n"
        "    mov r2, 8\n"
        "    classify r1, r2\n"
        "    load r0, q[r1+0]\n"
        "    mov r3, 32\n"
        "    alloc r4, r3\n"
        "    store q[r4+0], r0\n"  // secret into heap
        "    push r0\n"            // secret onto stack
        "    pop r5\n"
        "    halt\n"
        ".static 0x100000 zero 8\n";
    Program p = assemble(src);
    auto rep = analyze_objects(p, analyze(p));
    CHECK(rep.unattributed.empty());
    REQUIRE(rep.heap_sites.size() == 1);
    CHECK(rep.heap_sites[0].secret);
    bool stack_secret = false;
    for (const auto& [fn, fl] : rep.frames)
        stack_secret |= !fl.secret_deltas.empty();
    CHECK(stack_secret);
}

TEST_CASE("object tables from run subsets merge to the joint analysis") {
    Program p = assemble(fig5_program());
    auto runs = analyze(p, {{}, {}, {}});
    auto joint = analyze_objects(p, runs);
    auto first = analyze_objects(p, {runs[0]});
    auto rest = analyze_objects(p, {runs[1], runs[2]});

    REQUIRE(joint.heap_sites.size() == first.heap_sites.size());
    REQUIRE(joint.heap_sites.size() == rest.heap_sites.size());
    CHECK(joint.tracked_calls == first.tracked_calls);
    CHECK(joint.flagged_calls == first.flagged_calls);
    REQUIRE(joint.statics.size() == first.statics.size());
    for (size_t i = 0; i < joint.statics.size(); ++i) {
        CHECK(joint.statics[i].base == first.statics[i].base);
        CHECK(joint.statics[i].len == first.statics[i].len);
        CHECK(joint.statics[i].secret == first.statics[i].secret);
    }
}

TEST_CASE("non-canonical stack pointer manipulation aborts the analysis") {
    std::string src =
        "mov r1, 64\n"
        "mov r2, sp\n"
        "sub r2, r1\n"
        "mov sp, r2\n" // register move into sp
        "push r1\n"
        "halt\n";
    Program p = assemble(src);
    auto runs = analyze(p);
    CHECK_THROWS_AS(analyze_objects(p, runs), TraceAnomaly);
}
