#include "cipherbench/taint.hpp"
#include "support/corpus.hpp"
#include "support/flow_oracle.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace cb;

namespace {

constexpr u64 ARENA = 0x100000;

struct TaintRun {
    TaintRunResult engine;
    test::FlowOracle oracle;
    ExecResult exec;
};

u8 reg_shadow[16];

// Runs engine and oracle side by side over one execution.
TaintRun run_both(const Program& prog, const std::vector<Bytes>& inputs = {},
                  const TaintSources& sources = {}) {
    TaintRun out;
    TaintEngine eng(sources, inputs);
    Hooks hooks;
    hooks.pre_instruction = [&](const Instruction& in, u64 off, const MachineState& st) {
        out.oracle.pre(in, off, st);
        eng.pre(in, off, st);
    };
    hooks.post_instruction = [&](const Instruction& in, u64 off, MachineState& st) {
        out.oracle.post(in, off, st);
        eng.post(in, off, st);
    };
    ExecOptions opts;
    opts.inputs = inputs;
    out.exec = execute(prog, opts, &hooks);
    REQUIRE(out.exec.ok());
    out.engine.accesses = eng.accesses();
    out.engine.classes = classify_accesses(eng.accesses());
    out.engine.final_tainted_mem = eng.shadow().mem;
    out.engine.program_hash = prog.hash();
    // keep register shadows for inclusion checks
    for (unsigned r = 0; r < 16; ++r)
        reg_shadow[r] = eng.shadow().regs[r];
    return out;
}

} // namespace

TEST_CASE("loads from a classified region taint the whole destination") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "load r3, q[r1+0]\n"
        "load r4, b[r1+0]\n"
        "halt\n"
        ".static 0x100000 zero 16\n";
    auto r = run_both(assemble(src));
    CHECK(reg_shadow[3] == 0xff);
    CHECK(reg_shadow[4] == 0x01); // 1-byte load, upper bytes arrive clean
}

TEST_CASE("add of tainted and clean taints destination and flags") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "load r3, q[r1+0]\n"
        "mov r4, 5\n"
        "add r4, r3\n"
        "flsave r5\n"
        "halt\n"
        ".static 0x100000 zero 16\n";
    auto r = run_both(assemble(src));
    CHECK(reg_shadow[4] == 0xff);
    CHECK(reg_shadow[5] == 0xff); // flags were tainted at flsave
}

TEST_CASE("xor r,r keeps taint in the engine, clears in the oracle") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "load r3, q[r1+0]\n"
        "xor r3, r3\n"
        "store q[r1+8], r3\n"
        "halt\n"
        ".static 0x100000 zero 16\n";
    auto r = run_both(assemble(src));
    CHECK(reg_shadow[3] == 0xff);            // deliberate overtaint
    CHECK(r.oracle.regs[3] == 0);            // exact flow sees a constant
    CHECK(r.engine.final_tainted_mem.count(ARENA + 8) == 1);
    CHECK(r.oracle.mem.count(ARENA + 8) == 0);
}

TEST_CASE("cswap with classified inputs: both stores SECRET_ONLY") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 24\n"
        "classify r1, r2\n" // b, p, q all secret
        "load r0, q[r1+16]\n"
        + test::cswap_snippet(0x100000, 0x100008) +
        "halt\n"
        ".static 0x100000 01 00 00 00 00 00 00 00 22 00 00 00 00 00 00 00 01 00 00 00 00 00 00 00\n";
    Program p = assemble(src);
    auto r = run_both(p);
    unsigned secret_stores = 0;
    for (const auto& [off, c] : r.engine.classes) {
        auto in = decode(p.code, off - p.code_base);
        REQUIRE(in);
        if (in->op == Op::Store) {
            CHECK(c.cls() == Secrecy::SecretOnly);
            CHECK(c.writes_secret);
            ++secret_stores;
        }
    }
    CHECK(secret_stores == 2);
}

TEST_CASE("memcpy loop over public then classified buffer becomes MIXED") {
    // copies 16 bytes from [r2] to [r3]; source selected by input byte
    std::string src =
        "mov r1, 0x1c0000\n"
        "load r0, b[r1+0]\n"   // 0: public source, 1: secret source
        "mov r2, 0x100000\n"
        "mov r3, 0x100040\n"
        "mov r4, 8\n"
        "classify r3, r4\n"    // make 0x100040 the secret source buffer
        "mov r4, r2\n"
        "mov r5, r3\n"
        "cmp r0, 0\n"
        "cmovnz r4, r5\n"      // r4 = source (cmov on public flag)
        "mov r6, 0x100080\n"
        "load r7, q[r4+0]\n"
        "store q[r6+0], r7\n"
        "halt\n"
        ".static 0x100000 zero 16\n"
        ".static 0x100040 zero 16\n"
        ".static 0x100080 zero 16\n";
    Program p = assemble(src);
    TaintSources sources;
    sources.secret_inputs = {}; // classification comes from the classify call

    auto run_with = [&](u8 which) {
        return run_taint_once(p, {Bytes{which}}, sources);
    };
    auto pub = run_with(0);
    auto sec = run_with(1);
    REQUIRE(!pub.rejected);
    REQUIRE(!sec.rejected);
    ClassTable merged = merge_class_tables(pub.classes, sec.classes);

    u64 store_off = 0;
    for (u64 off = 0; off < p.code.size();) {
        auto in = decode(p.code, off);
        REQUIRE(in);
        if (in->op == Op::Store)
            store_off = p.code_base + off;
        off += encoded_length(in->op);
    }
    REQUIRE(store_off != 0);
    CHECK(class_of(pub.classes, store_off) == Secrecy::PublicOnly);
    CHECK(class_of(sec.classes, store_off) == Secrecy::SecretOnly);
    CHECK(class_of(merged, store_off) == Secrecy::Mixed);
}

TEST_CASE("no classify means no taint and all instructions public") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 3\n"
        "store q[r1+0], r2\n"
        "load r3, q[r1+0]\n"
        "halt\n"
        ".static 0x100000 zero 8\n";
    auto r = run_taint_once(assemble(src), {}, {});
    REQUIRE(!r.rejected);
    CHECK(r.final_tainted_mem.empty());
    for (const auto& [off, c] : r.classes)
        CHECK(c.cls() == Secrecy::PublicOnly);
}

TEST_CASE("class join is idempotent and commutative; monotone under more runs") {
    InstrClass pub{0, 3, false, false};
    InstrClass sec{2, 0, true, true};
    InstrClass j = pub;
    j.join(pub);
    CHECK(j.cls() == Secrecy::PublicOnly);
    InstrClass k = pub;
    k.join(sec);
    CHECK(k.cls() == Secrecy::Mixed);
    InstrClass k2 = sec;
    k2.join(pub);
    CHECK(k2.cls() == Secrecy::Mixed);
    // monotone: adding anything never demotes toward public
    InstrClass more = k;
    more.join(sec);
    CHECK(more.cls() == Secrecy::Mixed);
    InstrClass s2 = sec;
    s2.join(sec);
    CHECK(s2.cls() == Secrecy::SecretOnly);
}

TEST_CASE("ten-run merge equals one run when control flow is input independent") {
    std::string src =
        "mov r1, 0x1c0000\n"
        "load r0, q[r1+0]\n"
        + test::cswap_snippet(0x100000, 0x100008) +
        "halt\n"
        ".static 0x100000 11 22 33 44 55 66 77 88 99 aa bb cc dd ee ff 00\n";
    Program p = assemble(src);
    TaintSources sources;
    sources.secret_inputs = {0};
    std::mt19937_64 rng(5);
    std::vector<std::vector<Bytes>> ten;
    for (int i = 0; i < 10; ++i) {
        Bytes in(8);
        for (auto& b : in)
            b = u8(rng());
        ten.push_back({in});
    }
    TaintAnalysis one = run_taint(p, {ten[0]}, sources);
    TaintAnalysis all = run_taint(p, ten, sources);
    REQUIRE(one.classes.size() == all.classes.size());
    for (const auto& [off, c] : one.classes)
        CHECK(class_of(all.classes, off) == c.cls());
}

TEST_CASE("declassify clears labels until the next tainted write") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "load r3, q[r1+0]\n"
        "declassify r1, r2\n"
        "load r4, q[r1+0]\n"      // now clean
        "store q[r1+0], r3\n"     // tainted write re-taints
        "load r5, q[r1+0]\n"
        "halt\n"
        ".static 0x100000 zero 8\n";
    auto r = run_both(assemble(src));
    CHECK(reg_shadow[3] == 0xff);
    CHECK(reg_shadow[4] == 0x00);
    CHECK(reg_shadow[5] == 0xff);
}

TEST_CASE("tainted address register rejects the run") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 8\n"
        "classify r1, r2\n"
        "load r3, q[r1+0]\n"
        "load r4, q[r3+0]\n" // secret-dependent address
        "halt\n"
        ".static 0x100000 zero 8\n";
    auto r = run_taint_once(assemble(src), {}, {});
    CHECK(r.rejected);
    CHECK(r.reject_reason.find("address") != std::string::npos);
}

TEST_CASE("zero-length classify warns and does nothing") {
    std::string src =
        "mov r1, 0x100000\n"
        "mov r2, 0\n"
        "classify r1, r2\n"
        "halt\n"
        ".static 0x100000 zero 8\n";
    auto r = run_taint_once(assemble(src), {}, {});
    REQUIRE(!r.rejected);
    REQUIRE(r.warnings.size() == 1);
    CHECK(r.final_tainted_mem.empty());
}

TEST_CASE("merge_runs rejects mismatched program hashes") {
    Program a = assemble("mov r1, 1\nhalt\n");
    Program b = assemble("mov r1, 2\nhalt\n");
    TaintAnalysis ra = run_taint(a, {{}}, {});
    TaintAnalysis rb = run_taint(b, {{}}, {});
    CHECK_THROWS_AS(merge_runs({ra, rb}), Error);
    auto merged = merge_runs({ra, ra});
    CHECK(merged.runs.size() == 2);
}

// ---------------------------------------------------------------------------
// No-undertaint: engine labels must include everything the independent
// bit-precise flow oracle marks, per write and in the final state.

namespace {

struct GenProgram {
    std::string src;
};

GenProgram generate_program(std::mt19937_64& rng, unsigned max_ops) {
    std::ostringstream os;
    os << "mov r1, " << ARENA << "\n";
    // classify the first 24 bytes of the arena
    os << "mov r2, 24\nclassify r1, r2\n";
    unsigned n = 8 + rng() % max_ops;
    auto data_reg = [&] { return strf("r", 2 + rng() % 6); }; // r2..r7
    auto width = [&]() -> std::pair<char, unsigned> {
        switch (rng() % 4) {
        case 0: return {'b', 1};
        case 1: return {'w', 2};
        case 2: return {'d', 4};
        default: return {'q', 8};
        }
    };
    for (unsigned i = 0; i < n; ++i) {
        switch (rng() % 14) {
        case 0:
            os << "mov " << data_reg() << ", " << (rng() % 1000) << "\n";
            break;
        case 1:
            os << "mov " << data_reg() << ", " << data_reg() << "\n";
            break;
        case 2: {
            static const char* ops[] = {"add", "sub", "xor", "and", "or"};
            os << ops[rng() % 5] << " " << data_reg() << ", " << data_reg() << "\n";
            break;
        }
        case 3: {
            static const char* ops[] = {"add", "sub", "xor", "and", "or"};
            os << ops[rng() % 5] << " " << data_reg() << ", " << (rng() % 100) << "\n";
            break;
        }
        case 4:
            os << (rng() % 2 ? "shl " : "shr ") << data_reg() << ", " << (rng() % 24) << "\n";
            break;
        case 5: {
            std::string r = data_reg();
            os << "xor " << r << ", " << r << "\n";
            break;
        }
        case 6:
            os << "cmp " << data_reg() << ", " << data_reg() << "\n";
            break;
        case 7:
            os << (rng() % 2 ? "cmovz " : "cmovnz ") << data_reg() << ", " << data_reg() << "\n";
            break;
        case 8: {
            auto [c, w] = width();
            u64 disp = (rng() % (64 - w + 1));
            os << "load " << data_reg() << ", " << c << "[r1+" << disp << "]\n";
            break;
        }
        case 9: {
            auto [c, w] = width();
            u64 disp = (rng() % (64 - w + 1));
            os << "store " << c << "[r1+" << disp << "], " << data_reg() << "\n";
            break;
        }
        case 10: {
            auto [c, w] = width();
            u64 disp = (rng() % (64 - w + 1));
            static const char* ops[] = {"add", "sub", "xor", "and", "or"};
            os << ops[rng() % 5] << " " << c << "[r1+" << disp << "], " << data_reg() << "\n";
            break;
        }
        case 11: {
            auto [c, w] = width();
            u64 disp = (rng() % (64 - w + 1));
            os << (rng() % 2 ? "shl " : "shr ") << c << "[r1+" << disp << "], "
               << (rng() % 16) << "\n";
            break;
        }
        case 12:
            os << "push " << data_reg() << "\npop " << data_reg() << "\n";
            ++i;
            break;
        case 13: {
            // declassify a small window occasionally
            u64 disp = rng() % 56;
            os << "mov r8, " << (ARENA + disp) << "\nmov r9, 4\ndeclassify r8, r9\n";
            i += 2;
            break;
        }
        }
    }
    os << "halt\n";
    os << ".static 0x100000";
    for (int i = 0; i < 64; ++i) {
        char buf[8];
        snprintf(buf, sizeof buf, " %02x", unsigned(rng() & 0xff));
        os << buf;
    }
    os << "\n";
    return {os.str()};
}

void check_inclusion(const Program& p) {
    auto r = run_both(p);
    // per-write inclusion over the aligned non-structural write streams
    std::vector<const AccessRecord*> engine_writes;
    for (const auto& a : r.engine.accesses)
        if (a.is_write && !a.structural)
            engine_writes.push_back(&a);
    std::vector<const test::FlowOracle::WriteMask*> oracle_writes;
    for (const auto& w : r.oracle.writes)
        oracle_writes.push_back(&w);
    REQUIRE(engine_writes.size() == oracle_writes.size());
    for (size_t i = 0; i < oracle_writes.size(); ++i) {
        const auto* ew = engine_writes[i];
        const auto* ow = oracle_writes[i];
        REQUIRE(ew->offset == ow->offset);
        REQUIRE(ew->addr == ow->addr);
        for (unsigned b = 0; b < ew->width; ++b) {
            bool oracle_bit = (ow->bitmask >> (8 * b)) & 0xff;
            bool engine_bit = (ew->taint_mask >> b) & 1;
            if (oracle_bit)
                REQUIRE(engine_bit);
        }
    }
    // final memory inclusion
    for (const auto& [addr, bits] : r.oracle.mem) {
        if (!bits)
            continue;
        INFO("byte " << std::hex << addr);
        REQUIRE(r.engine.final_tainted_mem.count(addr) == 1);
    }
    // final register inclusion
    for (unsigned reg = 0; reg < 16; ++reg) {
        for (unsigned b = 0; b < 8; ++b) {
            bool oracle_bit = (r.oracle.regs[reg] >> (8 * b)) & 0xff;
            bool engine_bit = (reg_shadow[reg] >> b) & 1;
            if (oracle_bit)
                REQUIRE(engine_bit);
        }
    }
}

} // namespace

TEST_CASE("no undertainting against the exact-flow oracle (random programs)") {
    std::mt19937_64 rng(0xc0ffee);
    for (int trial = 0; trial < 300; ++trial) {
        auto gp = generate_program(rng, 40);
        INFO(gp.src);
        check_inclusion(assemble(gp.src));
    }
}

TEST_CASE("no undertainting over exhaustive two-op combinations") {
    // Template ops over r2, r3 and two arena cells, all ordered pairs, with
    // all four initial taint assignments of (r2, r3).
    std::vector<std::string> ops = {
        "add r2, r3",     "sub r3, r2",     "xor r2, r3",  "xor r2, r2",
        "and r2, r3",     "or r3, r2",      "shl r2, 5",   "shr r3, 3",
        "cmp r2, r3",     "cmovz r2, r3",   "cmovnz r3, r2",
        "store q[r1+32], r2", "load r2, q[r1+40]", "add q[r1+32], r3",
        "shl q[r1+32], 4", "push r2\npop r3",
    };
    for (int taint_cfg = 0; taint_cfg < 4; ++taint_cfg) {
        for (size_t a = 0; a < ops.size(); ++a) {
            for (size_t b = 0; b < ops.size(); ++b) {
                std::ostringstream os;
                os << "mov r1, " << ARENA << "\n";
                os << "mov r2, 8\nclassify r1, r2\n"; // first 8 bytes secret
                os << "load r2, q[r1+" << ((taint_cfg & 1) ? 0 : 8) << "]\n";
                os << "load r3, q[r1+" << ((taint_cfg & 2) ? 0 : 8) << "]\n";
                os << ops[a] << "\n" << ops[b] << "\nhalt\n";
                os << ".static 0x100000 de ad be ef 01 02 03 04 10 20 30 40 50 60 70 80 "
                      "00 00 00 00 00 00 00 00 00 00 00 00 00 00 00 00 "
                      "aa aa aa aa aa aa aa aa bb bb bb bb bb bb bb bb\n";
                check_inclusion(assemble(os.str()));
            }
        }
    }
}
