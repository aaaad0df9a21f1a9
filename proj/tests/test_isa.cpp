#include "cipherbench/isa.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace cb;

TEST_CASE("encoding lengths match the format table") {
    CHECK(encoded_length(Op::Break) == 1);
    CHECK(encoded_length(Op::Halt) == 1);
    CHECK(encoded_length(Op::Ret) == 1);
    CHECK(encoded_length(Op::Jmps) == 2);
    CHECK(encoded_length(Op::Marker) == 2);
    CHECK(encoded_length(Op::Jmp) == 5);
    CHECK(encoded_length(Op::Call) == 5);
    CHECK(encoded_length(Op::AddRR) == 3);
    CHECK(encoded_length(Op::MovImm) == 10);
    CHECK(encoded_length(Op::Store) == 8);
    CHECK(encoded_length(Op::MShr) == 8);
}

TEST_CASE("short jump encodes to 2 bytes, near jump to 5") {
    Instruction sj;
    sj.op = Op::Jmps;
    sj.imm = 4;
    CHECK(encode(sj).size() == 2);

    Instruction nj;
    nj.op = Op::Jmp;
    nj.imm = 0x1234;
    CHECK(encode(nj).size() == 5);
}

TEST_CASE("store round-trips through decode") {
    Instruction in;
    in.op = Op::Store;
    in.rd = 3;
    in.mem = {2, 0x10, 8};
    in.has_mem = true;
    Bytes e = encode(in);
    REQUIRE(e.size() == 8);
    auto back = decode(e, 0);
    REQUIRE(back.has_value());
    CHECK(*back == in);
}

TEST_CASE("decode rejects unknown opcode bytes") {
    Bytes junk{0xfe, 0x00, 0x00};
    DecodeError err{};
    auto r = decode(junk, 0, &err);
    CHECK(!r.has_value());
    CHECK(err.reason.find("unknown opcode") != std::string::npos);
}

namespace {

Instruction random_instruction(std::mt19937_64& rng) {
    static const Op ops[] = {
        Op::Break, Op::Halt, Op::Ret, Op::Jmps, Op::Jzs, Op::Jnzs, Op::Marker,
        Op::Jmp, Op::Jz, Op::Jnz, Op::Call, Op::MovRR, Op::AddRR, Op::SubRR,
        Op::XorRR, Op::AndRR, Op::OrRR, Op::ShlRR, Op::ShrRR, Op::AddRI,
        Op::SubRI, Op::XorRI, Op::AndRI, Op::OrRI, Op::ShlRI, Op::ShrRI,
        Op::CmpRR, Op::CmpRI, Op::Cmovz, Op::Cmovnz, Op::Push, Op::Pop,
        Op::Alloc, Op::Free, Op::Realloc, Op::BrkAdj, Op::Msize, Op::Classify,
        Op::Declassify, Op::Rand, Op::Copyn, Op::FlagSave, Op::FlagRest,
        Op::MovImm, Op::Load, Op::Store, Op::MAdd, Op::MSub, Op::MXor,
        Op::MAnd, Op::MOr, Op::MShl, Op::MShr,
    };
    Instruction in;
    in.op = ops[rng() % std::size(ops)];
    unsigned len = encoded_length(in.op);
    if (len == 3) {
        in.rd = rng() & 0xf;
        in.rs = rng() & 0xf;
        in.aux = u8(rng());
    } else if (len == 2) {
        if (in.op == Op::Marker)
            in.aux = u8(rng());
        else
            in.imm = i8(rng());
    } else if (len == 5) {
        in.imm = i32(rng());
    } else if (len == 10) {
        in.rd = rng() & 0xf;
        in.imm = i64(rng());
    } else if (len == 8) {
        in.rd = rng() & 0xf;
        in.mem.base = rng() & 0xf;
        in.mem.disp = i32(rng());
        static const u8 widths[] = {1, 2, 4, 8};
        in.mem.width = widths[rng() & 3];
        in.aux = u8(rng() & 63);
        in.has_mem = true;
    }
    return in;
}

} // namespace

TEST_CASE("decode(encode(i)) == i over random instructions") {
    std::mt19937_64 rng(0x1234);
    for (int i = 0; i < 2000; ++i) {
        Instruction in = random_instruction(rng);
        Bytes e = encode(in);
        REQUIRE(e.size() == encoded_length(in.op));
        auto back = decode(e, 0);
        REQUIRE(back.has_value());
        CHECK(*back == in);
    }
}

TEST_CASE("encoded length is determined by opcode alone") {
    std::mt19937_64 rng(99);
    for (int i = 0; i < 500; ++i) {
        Instruction a = random_instruction(rng);
        CHECK(encode(a).size() == encoded_length(a.op));
    }
}
