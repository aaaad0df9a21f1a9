#include "cipherbench/structure.hpp"
#include "support/corpus.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace cb;

namespace {

std::vector<ExecutionTrace> traces_of(const Program& p,
                                      const std::vector<std::vector<Bytes>>& input_sets) {
    std::vector<ExecutionTrace> out;
    for (const auto& inputs : input_sets) {
        ExecOptions opts;
        opts.inputs = inputs;
        auto r = execute(p, opts);
        REQUIRE(r.ok());
        out.push_back(std::move(r.trace));
    }
    return out;
}

} // namespace

TEST_CASE("straight-line function forms one block") {
    Program p = assemble("mov r1, 1\nmov r2, 2\nadd r1, r2\nhalt\n");
    auto table = find_basic_blocks(p, traces_of(p, {{}}));
    REQUIRE(table.blocks.size() == 1);
    CHECK(table.blocks[0].start == layout::CODE_BASE);
    CHECK(table.blocks[0].end == layout::CODE_BASE + 10 + 10 + 3 + 1);
    CHECK(table.coverage_gaps.empty());
}

TEST_CASE("four-block copy loop with a back edge") {
    // preheader / loop head (condition) / body (back edge) / exit
    std::string src =
        "    mov r0, 3\n"          // words to copy
        "    mov r1, 0x100000\n"
        "    mov r2, 0x100040\n"
        "head:\n"
        "    cmp r0, 0\n"
        "    jz done\n"
        "    load r3, q[r1+0]\n"
        "    store q[r2+0], r3\n"
        "    add r1, 8\n"
        "    add r2, 8\n"
        "    sub r0, 1\n"
        "    jmp head\n"
        "done:\n"
        "    halt\n"
        ".static 0x100000 zero 24\n"
        ".static 0x100040 zero 24\n";
    Program p = assemble(src);
    auto table = find_basic_blocks(p, traces_of(p, {{}}));
    REQUIRE(table.blocks.size() == 4);
    u64 head = p.symbols.at("head");
    u64 done = p.symbols.at("done");
    const BasicBlock* preheader = table.blocks.data();
    CHECK(preheader->successors.count(head));
    const BasicBlock* cond = table.at(head);
    REQUIRE(cond);
    CHECK(cond->successors.count(done));
    // body's terminator jumps back to head
    bool back_edge = false;
    for (const auto& b : table.blocks)
        if (b.start != head && b.successors.count(head))
            back_edge = true;
    CHECK(back_edge);
}

TEST_CASE("unexecuted cold branch lands in the coverage gap list") {
    std::string src =
        "    mov r0, 1\n"
        "    cmp r0, 0\n"
        "    jz cold\n"
        "    halt\n"
        "cold:\n"
        "    mov r2, 9\n"
        "    halt\n";
    Program p = assemble(src);
    auto table = find_basic_blocks(p, traces_of(p, {{}}));
    REQUIRE(table.coverage_gaps.size() == 1);
    CHECK(table.coverage_gaps[0] == p.symbols.at("cold"));
    CHECK(table.containing(p.symbols.at("cold")) == nullptr);
}

TEST_CASE("register written before next read is scratch at the preceding site") {
    std::string src =
        "    mov r3, 1\n"        // A
        "    mov r1, 0x100000\n"
        "    store q[r1+0], r3\n" // site S: r3 read here
        "    mov r3, 0\n"         // r3 overwritten without read
        "    mov r4, 2\n"
        "    halt\n"
        ".static 0x100000 zero 8\n";
    Program p = assemble(src);
    auto live = compute_liveness(p, traces_of(p, {{}}));
    u64 site = layout::CODE_BASE + 20; // the store
    u16 scratch = live.scratch(site);
    CHECK((scratch & (1 << 3)) != 0);  // r3 dead after the store
    CHECK((scratch & (1 << 15)) == 0); // sp never scratch
    // before the store, r3 is still live (the store reads it)
    u64 before = layout::CODE_BASE + 10; // the second mov
    CHECK((live.scratch(before) & (1 << 3)) == 0);
}

TEST_CASE("registers holding stale values are scratch at a memory site") {
    // r4 and r5 are written earlier, never read again: both scratch at the
    // read-modify-write site.
    std::string src =
        "    mov r4, 11\n"
        "    mov r5, 12\n"
        "    mov r1, 0x100000\n"
        "    mov r2, 3\n"
        "    shr q[r1+0], 8\n"
        "    store q[r1+8], r2\n"
        "    halt\n"
        ".static 0x100000 aa bb cc dd ee ff 11 22\n";
    Program p = assemble(src);
    auto live = compute_liveness(p, traces_of(p, {{}}));
    u64 shr_site = layout::CODE_BASE + 40;
    u16 scratch = live.scratch(shr_site);
    CHECK((scratch & (1 << 4)) != 0);
    CHECK((scratch & (1 << 5)) != 0);
    CHECK((scratch & (1 << 2)) == 0); // r2 still read by the later store
}

TEST_CASE("flags dead between consumed jz and the next cmp") {
    std::string src =
        "    mov r0, 1\n"
        "    cmp r0, 1\n"
        "    jz a\n"
        "a:  mov r2, 0x100000\n"
        "    store q[r2+0], r0\n"  // flags dead here
        "    cmp r0, 2\n"
        "    jz b\n"
        "    mov r3, 1\n"
        "b:  halt\n"
        ".static 0x100000 zero 8\n";
    Program p = assemble(src);
    auto live = compute_liveness(p, traces_of(p, {{}}));
    u64 store_site = p.symbols.at("a") + 10;
    CHECK(!live.flags_live(store_site));
    // right after the cmp the flags are live (consumed by jz)
    u64 cmp2 = store_site + 8;
    CHECK(live.flags_live(cmp2));
    // and before the store they are already dead (jz consumed them)
    CHECK(!live.flags_live_before(store_site));
}

TEST_CASE("unobserved offsets report empty scratch and live flags") {
    Program p = assemble("mov r1, 1\nhalt\n");
    auto live = compute_liveness(p, traces_of(p, {{}}));
    CHECK(live.scratch(0xdead) == 0);
    CHECK(live.flags_live(0xdead));
}

TEST_CASE("adding runs only shrinks scratch sets") {
    // run-dependent control flow: input byte selects whether r5 is read
    std::string src =
        "    mov r1, 0x1c0000\n"
        "    load r0, b[r1+0]\n"
        "    mov r5, 77\n"
        "    mov r2, 0x100000\n"
        "    store q[r2+0], r0\n" // site: is r5 scratch here?
        "    cmp r0, 0\n"
        "    jz skip\n"
        "    store q[r2+8], r5\n" // r5 read only when input != 0
        "skip:\n"
        "    halt\n"
        ".static 0x100000 zero 16\n";
    Program p = assemble(src);
    u64 site = layout::CODE_BASE + 10 + 8 + 10 + 10;

    auto live_zero = compute_liveness(p, traces_of(p, {{Bytes{0}}}));
    CHECK((live_zero.scratch(site) & (1 << 5)) != 0);

    auto live_both = compute_liveness(p, traces_of(p, {{Bytes{0}}, {Bytes{1}}}));
    CHECK((live_both.scratch(site) & (1 << 5)) == 0);
    // intersection property: at offsets a single run observed, the joint
    // scratch set is a subset of that run's scratch set
    auto live_one = compute_liveness(p, traces_of(p, {{Bytes{1}}}));
    for (const auto& [off, info] : live_both.at) {
        u16 joint = info.scratch_regs;
        if (live_zero.at.count(off))
            CHECK((joint & ~live_zero.scratch(off)) == 0);
        if (live_one.at.count(off))
            CHECK((joint & ~live_one.scratch(off)) == 0);
    }
}

TEST_CASE("clobbering reported scratch registers never changes the outcome") {
    // run a program, then re-run writing sentinels into every reported
    // scratch register after each instruction; outputs must match.
    std::string src =
        "    mov r1, 0x1c0000\n"
        "    load r0, q[r1+0]\n"
        "    mov r2, 0x100000\n"
        "    mov r3, r0\n"
        "    xor r3, 0x11\n"
        "    store q[r2+0], r3\n"
        "    mov r4, r0\n"
        "    and r4, 0x3f\n"
        "    add q[r2+0], r4\n"
        "    mov r5, 1\n"
        "    add r5, r0\n"
        "    store q[r2+8], r5\n"
        "    halt\n"
        ".static 0x100000 zero 16\n";
    Program p = assemble(src);
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        Bytes input(8);
        for (auto& b : input)
            b = u8(rng());
        ExecOptions opts;
        opts.inputs = {input};
        auto base = execute(p, opts);
        REQUIRE(base.ok());
        auto live = compute_liveness(p, {base.trace});

        Hooks hooks;
        hooks.post_instruction = [&](const Instruction&, u64 off, MachineState& st) {
            u16 scratch = live.scratch(off);
            for (unsigned r = 0; r < 16; ++r)
                if (scratch & (u16(1) << r))
                    st.regs[r] = 0xdeadbeefcafebabeULL;
        };
        auto clobbered = execute(p, opts, &hooks);
        REQUIRE(clobbered.ok());
        CHECK(clobbered.state.mem.read(0x100000, 8) == base.state.mem.read(0x100000, 8));
        CHECK(clobbered.state.mem.read(0x100008, 8) == base.state.mem.read(0x100008, 8));
    }
}
