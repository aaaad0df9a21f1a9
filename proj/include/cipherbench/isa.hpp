#pragma once

#include "common.hpp"

#include <optional>
#include <span>

// MiniCT instruction set. Variable-length encoding:
//   break/halt/ret                  1 byte
//   short jumps, marker             2 bytes
//   reg/reg, reg/imm8, intrinsics   3 bytes
//   near jumps, call                5 bytes
//   memory-operand forms            8 bytes
//   64-bit immediate move          10 bytes

namespace cb {

enum class Op : u8 {
    // 1 byte
    Break = 0x01,
    Halt = 0x02,
    Ret = 0x03,
    // 2 bytes: opcode + rel8 / marker payload
    Jmps = 0x10,
    Jzs = 0x11,
    Jnzs = 0x12,
    Marker = 0x13, // payload: bit7 = begin, bits 0..6 = id
    // 5 bytes: opcode + rel32
    Jmp = 0x18,
    Jz = 0x19,
    Jnz = 0x1a,
    Call = 0x1b,
    // 3 bytes: opcode + (rd<<4 | rs) + aux
    MovRR = 0x20,
    AddRR = 0x21,
    SubRR = 0x22,
    XorRR = 0x23,
    AndRR = 0x24,
    OrRR = 0x25,
    ShlRR = 0x26,
    ShrRR = 0x27,
    AddRI = 0x28, // aux = imm8, sign-extended
    SubRI = 0x29,
    XorRI = 0x2a,
    AndRI = 0x2b,
    OrRI = 0x2c,
    ShlRI = 0x2d, // aux = shift amount 0..63
    ShrRI = 0x2e,
    CmpRR = 0x2f,
    CmpRI = 0x30,
    Cmovz = 0x31,
    Cmovnz = 0x32,
    Push = 0x33, // rs
    Pop = 0x34,  // rd
    Alloc = 0x38,      // rd = alloc(size = rs)
    Free = 0x39,       // free(ptr = rs)
    Realloc = 0x3a,    // rd = realloc(ptr = rd, size = rs)
    BrkAdj = 0x3b,     // rd = (break += signed rs)
    Msize = 0x3c,      // rd = allocation size of ptr rs
    Classify = 0x3d,   // classify(addr = rd, len = rs)
    Declassify = 0x3e, // declassify(addr = rd, len = rs)
    Rand = 0x3f,       // rd = secure randomness
    Copyn = 0x40,      // block copy: dst = rd, src = rs, 8-byte word count in reg aux
    FlagSave = 0x41,   // rd = packed ZF/SF/CF
    FlagRest = 0x42,   // flags = packed rs
    // 10 bytes
    MovImm = 0x50,
    // 8 bytes: opcode + (reg<<4 | base) + disp32 + width + aux
    Load = 0x60,
    Store = 0x61,
    MAdd = 0x62,
    MSub = 0x63,
    MXor = 0x64,
    MAnd = 0x65,
    MOr = 0x66,
    MShl = 0x67, // aux = shift amount, reg field unused
    MShr = 0x68,
};

inline constexpr unsigned SP = 15; // stack pointer register, by convention

struct MemOperand {
    u8 base = 0;
    i32 disp = 0;
    u8 width = 8; // 1, 2, 4 or 8
};

struct Instruction {
    Op op = Op::Halt;
    u8 rd = 0;
    u8 rs = 0;
    u8 aux = 0;        // imm8 / shift amount / third register / marker payload
    i64 imm = 0;       // MovImm value; branch rel for jump forms
    MemOperand mem{};
    bool has_mem = false;

    bool operator==(const Instruction& o) const {
        if (op != o.op || rd != o.rd || rs != o.rs || aux != o.aux || imm != o.imm ||
            has_mem != o.has_mem)
            return false;
        if (has_mem)
            return mem.base == o.mem.base && mem.disp == o.mem.disp && mem.width == o.mem.width;
        return true;
    }
};

inline unsigned encoded_length(Op op) {
    switch (op) {
    case Op::Break:
    case Op::Halt:
    case Op::Ret:
        return 1;
    case Op::Jmps:
    case Op::Jzs:
    case Op::Jnzs:
    case Op::Marker:
        return 2;
    case Op::Jmp:
    case Op::Jz:
    case Op::Jnz:
    case Op::Call:
        return 5;
    case Op::MovImm:
        return 10;
    case Op::Load:
    case Op::Store:
    case Op::MAdd:
    case Op::MSub:
    case Op::MXor:
    case Op::MAnd:
    case Op::MOr:
    case Op::MShl:
    case Op::MShr:
        return 8;
    default:
        return 3;
    }
}

inline bool is_short_jump(Op op) { return op == Op::Jmps || op == Op::Jzs || op == Op::Jnzs; }
inline bool is_near_jump(Op op) {
    return op == Op::Jmp || op == Op::Jz || op == Op::Jnz || op == Op::Call;
}
inline bool is_branch(Op op) { return is_short_jump(op) || is_near_jump(op); }
inline bool is_conditional(Op op) {
    return op == Op::Jz || op == Op::Jnz || op == Op::Jzs || op == Op::Jnzs;
}
// Ends a basic block.
inline bool is_terminator(Op op) {
    return is_branch(op) || op == Op::Ret || op == Op::Halt || op == Op::Break;
}
inline bool is_mem_op(Op op) { return op >= Op::Load && op <= Op::MShr; }
inline bool is_mem_rmw(Op op) { return op >= Op::MAdd && op <= Op::MShr; }

inline bool valid_width(u8 w) { return w == 1 || w == 2 || w == 4 || w == 8; }

inline Bytes encode(const Instruction& in) {
    Bytes out;
    out.push_back(u8(in.op));
    switch (encoded_length(in.op)) {
    case 1:
        break;
    case 2:
        if (in.op == Op::Marker)
            out.push_back(in.aux);
        else
            out.push_back(u8(i8(in.imm)));
        break;
    case 3:
        out.push_back(u8(in.rd << 4) | (in.rs & 0xf));
        out.push_back(in.aux);
        break;
    case 5:
        append_le(out, u64(u32(i32(in.imm))), 4);
        break;
    case 8:
        out.push_back(u8(in.rd << 4) | (in.mem.base & 0xf));
        append_le(out, u64(u32(in.mem.disp)), 4);
        out.push_back(in.mem.width);
        out.push_back(in.aux);
        break;
    case 10:
        out.push_back(in.rd);
        append_le(out, u64(in.imm), 8);
        break;
    }
    return out;
}

inline bool valid_opcode(u8 b) {
    switch (Op(b)) {
    case Op::Break: case Op::Halt: case Op::Ret:
    case Op::Jmps: case Op::Jzs: case Op::Jnzs: case Op::Marker:
    case Op::Jmp: case Op::Jz: case Op::Jnz: case Op::Call:
    case Op::MovRR: case Op::AddRR: case Op::SubRR: case Op::XorRR:
    case Op::AndRR: case Op::OrRR: case Op::ShlRR: case Op::ShrRR:
    case Op::AddRI: case Op::SubRI: case Op::XorRI: case Op::AndRI:
    case Op::OrRI: case Op::ShlRI: case Op::ShrRI:
    case Op::CmpRR: case Op::CmpRI: case Op::Cmovz: case Op::Cmovnz:
    case Op::Push: case Op::Pop:
    case Op::Alloc: case Op::Free: case Op::Realloc: case Op::BrkAdj:
    case Op::Msize: case Op::Classify: case Op::Declassify: case Op::Rand:
    case Op::Copyn: case Op::FlagSave: case Op::FlagRest:
    case Op::MovImm:
    case Op::Load: case Op::Store: case Op::MAdd: case Op::MSub:
    case Op::MXor: case Op::MAnd: case Op::MOr: case Op::MShl: case Op::MShr:
        return true;
    default:
        return false;
    }
}

struct DecodeError {
    u64 offset;
    std::string reason;
};

// Decodes one instruction starting at `offset` within `code`.
inline std::optional<Instruction> decode(std::span<const u8> code, u64 offset,
                                         DecodeError* err = nullptr) {
    auto bail = [&](const std::string& why) -> std::optional<Instruction> {
        if (err) *err = {offset, why};
        return std::nullopt;
    };
    if (offset >= code.size())
        return bail("offset past end of code");
    u8 b = code[offset];
    if (!valid_opcode(b))
        return bail(strf("unknown opcode byte ", hex(b)));
    Instruction in;
    in.op = Op(b);
    unsigned len = encoded_length(in.op);
    if (offset + len > code.size())
        return bail("truncated instruction");
    const u8* p = code.data() + offset + 1;
    switch (len) {
    case 1:
        break;
    case 2:
        if (in.op == Op::Marker)
            in.aux = p[0];
        else
            in.imm = i8(p[0]);
        break;
    case 3:
        in.rd = p[0] >> 4;
        in.rs = p[0] & 0xf;
        in.aux = p[1];
        break;
    case 5:
        in.imm = i32(u32(load_le(p, 4)));
        break;
    case 8:
        in.rd = p[0] >> 4;
        in.mem.base = p[0] & 0xf;
        in.mem.disp = i32(u32(load_le(p + 1, 4)));
        in.mem.width = p[5];
        in.aux = p[6];
        in.has_mem = true;
        if (!valid_width(in.mem.width))
            return bail(strf("bad access width ", unsigned(in.mem.width)));
        break;
    case 10:
        in.rd = p[0];
        in.imm = i64(load_le(p + 1, 8));
        if (in.rd > 15)
            return bail("bad register id");
        break;
    }
    return in;
}

// Branch target for jump/call forms, given the instruction's own offset.
inline u64 branch_target(const Instruction& in, u64 offset) {
    return offset + encoded_length(in.op) + u64(in.imm);
}

// Register read/write sets, used by liveness and the taint engine.
struct RegUse {
    u16 reads = 0;
    u16 writes = 0;
    bool reads_flags = false;
    bool writes_flags = false;
};

inline RegUse reg_use(const Instruction& in) {
    RegUse u;
    auto rd = [&] { u.reads |= u16(1) << in.rd; };
    auto rs = [&] { u.reads |= u16(1) << in.rs; };
    auto wd = [&] { u.writes |= u16(1) << in.rd; };
    auto sp_rw = [&] {
        u.reads |= u16(1) << SP;
        u.writes |= u16(1) << SP;
    };
    switch (in.op) {
    case Op::Break: case Op::Halt: case Op::Marker:
    case Op::Jmp: case Op::Jmps:
        break;
    case Op::Jz: case Op::Jnz: case Op::Jzs: case Op::Jnzs:
        u.reads_flags = true;
        break;
    case Op::Call: case Op::Ret:
        sp_rw();
        break;
    case Op::MovRR:
        rs(); wd();
        break;
    case Op::AddRR: case Op::SubRR: case Op::XorRR: case Op::AndRR:
    case Op::OrRR: case Op::ShlRR: case Op::ShrRR:
        rd(); rs(); wd();
        u.writes_flags = true;
        break;
    case Op::AddRI: case Op::SubRI: case Op::XorRI: case Op::AndRI:
    case Op::OrRI: case Op::ShlRI: case Op::ShrRI:
        rd(); wd();
        u.writes_flags = true;
        break;
    case Op::CmpRR:
        rd(); rs();
        u.writes_flags = true;
        break;
    case Op::CmpRI:
        rd();
        u.writes_flags = true;
        break;
    case Op::Cmovz: case Op::Cmovnz:
        rd(); rs(); wd();
        u.reads_flags = true;
        break;
    case Op::Push:
        rs(); sp_rw();
        break;
    case Op::Pop:
        wd(); sp_rw();
        break;
    case Op::Alloc:
        rs(); wd();
        break;
    case Op::Free:
        rs();
        break;
    case Op::Realloc:
        rd(); rs(); wd();
        break;
    case Op::BrkAdj:
        rs(); wd();
        break;
    case Op::Msize:
        rs(); wd();
        break;
    case Op::Classify: case Op::Declassify:
        rd(); rs();
        break;
    case Op::Rand:
        wd();
        break;
    case Op::Copyn:
        rd(); rs();
        u.reads |= u16(1) << (in.aux & 0xf);
        break;
    case Op::FlagSave:
        wd();
        u.reads_flags = true;
        break;
    case Op::FlagRest:
        rs();
        u.writes_flags = true;
        break;
    case Op::MovImm:
        wd();
        break;
    case Op::Load:
        u.reads |= u16(1) << in.mem.base;
        wd();
        break;
    case Op::Store:
        u.reads |= u16(1) << in.mem.base;
        rd();
        break;
    case Op::MAdd: case Op::MSub: case Op::MXor: case Op::MAnd: case Op::MOr:
        u.reads |= u16(1) << in.mem.base;
        rd();
        u.writes_flags = true;
        break;
    case Op::MShl: case Op::MShr:
        u.reads |= u16(1) << in.mem.base;
        u.writes_flags = true;
        break;
    }
    return u;
}

inline const char* op_name(Op op) {
    switch (op) {
    case Op::Break: return "break";
    case Op::Halt: return "halt";
    case Op::Ret: return "ret";
    case Op::Jmps: return "jmps";
    case Op::Jzs: return "jzs";
    case Op::Jnzs: return "jnzs";
    case Op::Marker: return "marker";
    case Op::Jmp: return "jmp";
    case Op::Jz: return "jz";
    case Op::Jnz: return "jnz";
    case Op::Call: return "call";
    case Op::MovRR: case Op::MovImm: return "mov";
    case Op::AddRR: case Op::AddRI: return "add";
    case Op::SubRR: case Op::SubRI: return "sub";
    case Op::XorRR: case Op::XorRI: return "xor";
    case Op::AndRR: case Op::AndRI: return "and";
    case Op::OrRR: case Op::OrRI: return "or";
    case Op::ShlRR: case Op::ShlRI: return "shl";
    case Op::ShrRR: case Op::ShrRI: return "shr";
    case Op::CmpRR: case Op::CmpRI: return "cmp";
    case Op::Cmovz: return "cmovz";
    case Op::Cmovnz: return "cmovnz";
    case Op::Push: return "push";
    case Op::Pop: return "pop";
    case Op::Alloc: return "alloc";
    case Op::Free: return "free";
    case Op::Realloc: return "realloc";
    case Op::BrkAdj: return "brk";
    case Op::Msize: return "msize";
    case Op::Classify: return "classify";
    case Op::Declassify: return "declassify";
    case Op::Rand: return "rand";
    case Op::Copyn: return "copyn";
    case Op::FlagSave: return "flsave";
    case Op::FlagRest: return "flrest";
    case Op::Load: return "load";
    case Op::Store: return "store";
    case Op::MAdd: return "add";
    case Op::MSub: return "sub";
    case Op::MXor: return "xor";
    case Op::MAnd: return "and";
    case Op::MOr: return "or";
    case Op::MShl: return "shl";
    case Op::MShr: return "shr";
    }
    return "?";
}

} // namespace cb
