#pragma once

#include "program.hpp"

#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

// Assembler for the textual MiniCT format: one instruction per line,
// `label:` definitions, `;` comments, and the directives
//   .entry <label>
//   .static <addr> <hex bytes...>
//   .static <addr> zero <n>
// Memory operands are written as w[rN+disp] with width prefix b/w/d/q.

namespace cb {

class AsmError : public Error {
public:
    AsmError(unsigned line, const std::string& msg)
        : Error(strf("line ", line, ": ", msg)), line(line) {}
    unsigned line;
};

namespace detail {

struct AsmLine {
    unsigned line_no = 0;
    Instruction instr;
    std::string target_label; // pending branch target
    i64 target_addr = -1;     // absolute numeric branch target
    u64 offset = 0;           // assigned code address
};

class Tokenizer {
public:
    Tokenizer(const std::string& s, unsigned line) : s_(s), line_(line) {}

    std::optional<std::string> next() {
        while (pos_ < s_.size() && std::isspace(u8(s_[pos_])))
            ++pos_;
        if (pos_ >= s_.size() || s_[pos_] == ';')
            return std::nullopt;
        size_t start = pos_;
        char c = s_[pos_];
        if (c == ',' || c == ':') {
            ++pos_;
            return std::string(1, c);
        }
        if (c == '[') {
            // memory operand body up to ']'
            size_t close = s_.find(']', pos_);
            if (close == std::string::npos)
                throw AsmError(line_, "unterminated memory operand");
            pos_ = close + 1;
            return s_.substr(start, pos_ - start);
        }
        while (pos_ < s_.size() && !std::isspace(u8(s_[pos_])) && s_[pos_] != ',' &&
               s_[pos_] != ':' && s_[pos_] != ';' && s_[pos_] != '[')
            ++pos_;
        if (pos_ < s_.size() && s_[pos_] == '[') {
            size_t close = s_.find(']', pos_);
            if (close == std::string::npos)
                throw AsmError(line_, "unterminated memory operand");
            pos_ = close + 1;
        }
        return s_.substr(start, pos_ - start);
    }

    bool peek_colon() {
        size_t p = pos_;
        while (p < s_.size() && std::isspace(u8(s_[p])))
            ++p;
        return p < s_.size() && s_[p] == ':';
    }

private:
    const std::string& s_;
    unsigned line_;
    size_t pos_ = 0;
};

inline bool parse_int(const std::string& t, i64& out) {
    if (t.empty())
        return false;
    size_t i = 0;
    bool neg = false;
    if (t[0] == '-' || t[0] == '+') {
        neg = t[0] == '-';
        i = 1;
    }
    if (i >= t.size())
        return false;
    int base = 10;
    if (t.size() > i + 1 && t[i] == '0' && (t[i + 1] == 'x' || t[i + 1] == 'X')) {
        base = 16;
        i += 2;
    }
    u64 v = 0;
    size_t digits = 0;
    for (; i < t.size(); ++i) {
        char c = std::tolower(u8(t[i]));
        int d;
        if (c >= '0' && c <= '9')
            d = c - '0';
        else if (base == 16 && c >= 'a' && c <= 'f')
            d = 10 + (c - 'a');
        else if (c == '_')
            continue;
        else
            return false;
        v = v * u64(base) + u64(d);
        ++digits;
    }
    if (!digits)
        return false;
    out = neg ? -i64(v) : i64(v);
    return true;
}

inline std::optional<unsigned> parse_reg(const std::string& t) {
    if (t == "sp")
        return SP;
    if (t.size() >= 2 && (t[0] == 'r' || t[0] == 'R')) {
        i64 n;
        if (parse_int(t.substr(1), n) && n >= 0 && n <= 15)
            return unsigned(n);
    }
    return std::nullopt;
}

// w[rN+disp] -> (width, base, disp)
inline std::optional<MemOperand> parse_mem(const std::string& t, unsigned line) {
    if (t.size() < 4)
        return std::nullopt;
    u8 width;
    switch (std::tolower(u8(t[0]))) {
    case 'b': width = 1; break;
    case 'w': width = 2; break;
    case 'd': width = 4; break;
    case 'q': width = 8; break;
    default: return std::nullopt;
    }
    if (t[1] != '[' || t.back() != ']')
        return std::nullopt;
    std::string body = t.substr(2, t.size() - 3);
    size_t split = body.find_first_of("+-", 1);
    std::string reg_part = split == std::string::npos ? body : body.substr(0, split);
    auto base = parse_reg(reg_part);
    if (!base)
        throw AsmError(line, strf("bad base register in memory operand '", t, "'"));
    i64 disp = 0;
    if (split != std::string::npos) {
        if (!parse_int(body.substr(split), disp))
            throw AsmError(line, strf("bad displacement in memory operand '", t, "'"));
    }
    if (disp < i64(INT32_MIN) || disp > i64(INT32_MAX))
        throw AsmError(line, "displacement out of signed 32-bit range");
    MemOperand m;
    m.base = u8(*base);
    m.disp = i32(disp);
    m.width = width;
    return m;
}

} // namespace detail

inline Program assemble(const std::string& source, u64 code_base = layout::CODE_BASE) {
    using namespace detail;

    std::vector<AsmLine> lines;
    std::map<std::string, u64> labels; // label -> instruction index at definition
    std::vector<std::pair<std::string, unsigned>> label_defs;
    Program prog;
    prog.code_base = code_base;
    std::string entry_label;

    auto is_label_char = [](char c) {
        return std::isalnum(u8(c)) || c == '_' || c == '.';
    };

    std::vector<std::string> raw_lines;
    {
        std::string cur;
        for (char c : source) {
            if (c == '\n') {
                raw_lines.push_back(cur);
                cur.clear();
            } else if (c == '/') {
                // allow "a / b" one-line separators used in quick snippets
                raw_lines.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        raw_lines.push_back(cur);
    }

    unsigned line_no = 0;
    std::vector<std::pair<std::string, size_t>> pending_labels; // name -> next instr idx
    for (const std::string& raw : raw_lines) {
        ++line_no;
        Tokenizer tok(raw, line_no);
        auto first = tok.next();
        if (!first)
            continue;

        // directives
        if ((*first)[0] == '.') {
            if (*first == ".entry") {
                auto t = tok.next();
                if (!t)
                    throw AsmError(line_no, ".entry needs a label");
                entry_label = *t;
            } else if (*first == ".static") {
                auto at = tok.next();
                i64 addr;
                if (!at || !parse_int(*at, addr))
                    throw AsmError(line_no, ".static needs an address");
                Bytes data;
                auto t = tok.next();
                if (t && *t == "zero") {
                    auto n = tok.next();
                    i64 len;
                    if (!n || !parse_int(*n, len) || len < 0)
                        throw AsmError(line_no, ".static zero needs a length");
                    data.assign(size_t(len), 0);
                } else {
                    while (t) {
                        i64 b;
                        if (!parse_int("0x" + *t, b) || b < 0 || b > 0xff)
                            throw AsmError(line_no, strf("bad hex byte '", *t, "'"));
                        data.push_back(u8(b));
                        t = tok.next();
                    }
                }
                if (u64(addr) < layout::STATIC_BASE ||
                    u64(addr) + data.size() > layout::STATIC_LIMIT)
                    throw AsmError(line_no, "static data outside the statics region");
                prog.statics.emplace_back(u64(addr), std::move(data));
            } else {
                throw AsmError(line_no, strf("unknown directive '", *first, "'"));
            }
            continue;
        }

        // labels (possibly several, possibly followed by an instruction)
        std::string word = *first;
        while (tok.peek_colon()) {
            auto colon = tok.next(); // ':'
            (void)colon;
            for (char c : word)
                if (!is_label_char(c))
                    throw AsmError(line_no, strf("bad label name '", word, "'"));
            pending_labels.emplace_back(word, lines.size());
            auto nxt = tok.next();
            if (!nxt) {
                word.clear();
                break;
            }
            word = *nxt;
        }
        if (word.empty())
            continue;

        AsmLine al;
        al.line_no = line_no;
        Instruction& in = al.instr;

        auto next_tok = [&]() -> std::string {
            auto t = tok.next();
            if (!t)
                throw AsmError(line_no, "unexpected end of line");
            if (*t == ",")
                t = tok.next();
            if (!t)
                throw AsmError(line_no, "unexpected end of line");
            return *t;
        };
        auto end_of_line = [&] {
            auto t = tok.next();
            if (t)
                throw AsmError(line_no, strf("trailing operand '", *t, "'"));
        };
        auto want_reg = [&](const std::string& t) -> unsigned {
            auto r = parse_reg(t);
            if (!r)
                throw AsmError(line_no, strf("expected register, got '", t, "'"));
            return *r;
        };

        std::string m = word;
        for (char& c : m)
            c = char(std::tolower(u8(c)));

        auto branch_operand = [&](Op op) {
            in.op = op;
            std::string t = next_tok();
            i64 v;
            if (parse_int(t, v))
                al.target_addr = v;
            else
                al.target_label = t;
            end_of_line();
        };

        auto two_reg = [&](Op op) {
            in.op = op;
            in.rd = u8(want_reg(next_tok()));
            in.rs = u8(want_reg(next_tok()));
            end_of_line();
        };

        auto alu = [&](Op rr, Op ri, Op mem_op, bool shift) {
            std::string a = next_tok();
            if (auto mo = parse_mem(a, line_no)) {
                // read-modify-write memory form
                in.mem = *mo;
                in.has_mem = true;
                std::string b = next_tok();
                if (shift) {
                    i64 v;
                    if (!parse_int(b, v) || v < 0 || v > 63)
                        throw AsmError(line_no, "memory shift needs an immediate 0..63");
                    in.op = mem_op;
                    in.aux = u8(v);
                } else {
                    in.op = mem_op;
                    in.rd = u8(want_reg(b));
                }
                end_of_line();
                return;
            }
            in.rd = u8(want_reg(a));
            std::string b = next_tok();
            if (auto r = parse_reg(b)) {
                in.op = rr;
                in.rs = u8(*r);
            } else {
                i64 v;
                if (!parse_int(b, v))
                    throw AsmError(line_no, strf("expected register or immediate, got '", b, "'"));
                if (shift) {
                    if (v < 0 || v > 63)
                        throw AsmError(line_no, "shift amount must be 0..63");
                } else if (v < -128 || v > 127) {
                    throw AsmError(line_no, "ALU immediate must fit in signed 8 bits (use mov)");
                }
                in.op = ri;
                in.aux = u8(v);
            }
            end_of_line();
        };

        if (m == "mov") {
            std::string a = next_tok();
            in.rd = u8(want_reg(a));
            std::string b = next_tok();
            if (auto r = parse_reg(b)) {
                in.op = Op::MovRR;
                in.rs = u8(*r);
            } else {
                i64 v;
                if (!parse_int(b, v))
                    throw AsmError(line_no, strf("expected register or immediate, got '", b, "'"));
                in.op = Op::MovImm;
                in.imm = v;
            }
            end_of_line();
        } else if (m == "add") {
            alu(Op::AddRR, Op::AddRI, Op::MAdd, false);
        } else if (m == "sub") {
            alu(Op::SubRR, Op::SubRI, Op::MSub, false);
        } else if (m == "xor") {
            alu(Op::XorRR, Op::XorRI, Op::MXor, false);
        } else if (m == "and") {
            alu(Op::AndRR, Op::AndRI, Op::MAnd, false);
        } else if (m == "or") {
            alu(Op::OrRR, Op::OrRI, Op::MOr, false);
        } else if (m == "shl") {
            alu(Op::ShlRR, Op::ShlRI, Op::MShl, true);
        } else if (m == "shr") {
            alu(Op::ShrRR, Op::ShrRI, Op::MShr, true);
        } else if (m == "cmp") {
            in.rd = u8(want_reg(next_tok()));
            std::string b = next_tok();
            if (auto r = parse_reg(b)) {
                in.op = Op::CmpRR;
                in.rs = u8(*r);
            } else {
                i64 v;
                if (!parse_int(b, v) || v < -128 || v > 127)
                    throw AsmError(line_no, "cmp immediate must fit in signed 8 bits");
                in.op = Op::CmpRI;
                in.aux = u8(v);
            }
            end_of_line();
        } else if (m == "cmovz") {
            two_reg(Op::Cmovz);
        } else if (m == "cmovnz") {
            two_reg(Op::Cmovnz);
        } else if (m == "load") {
            in.op = Op::Load;
            in.rd = u8(want_reg(next_tok()));
            auto mo = parse_mem(next_tok(), line_no);
            if (!mo)
                throw AsmError(line_no, "load needs a memory operand");
            in.mem = *mo;
            in.has_mem = true;
            end_of_line();
        } else if (m == "store") {
            in.op = Op::Store;
            auto mo = parse_mem(next_tok(), line_no);
            if (!mo)
                throw AsmError(line_no, "store needs a memory operand");
            in.mem = *mo;
            in.has_mem = true;
            in.rd = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "jmp") {
            branch_operand(Op::Jmp);
        } else if (m == "jz") {
            branch_operand(Op::Jz);
        } else if (m == "jnz") {
            branch_operand(Op::Jnz);
        } else if (m == "jmps") {
            branch_operand(Op::Jmps);
        } else if (m == "jzs") {
            branch_operand(Op::Jzs);
        } else if (m == "jnzs") {
            branch_operand(Op::Jnzs);
        } else if (m == "call") {
            branch_operand(Op::Call);
        } else if (m == "ret") {
            in.op = Op::Ret;
            end_of_line();
        } else if (m == "halt") {
            in.op = Op::Halt;
            end_of_line();
        } else if (m == "break") {
            in.op = Op::Break;
            end_of_line();
        } else if (m == "push") {
            in.op = Op::Push;
            in.rs = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "pop") {
            in.op = Op::Pop;
            in.rd = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "alloc") {
            two_reg(Op::Alloc);
        } else if (m == "free") {
            in.op = Op::Free;
            in.rs = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "realloc") {
            two_reg(Op::Realloc);
        } else if (m == "brk") {
            two_reg(Op::BrkAdj);
        } else if (m == "msize") {
            two_reg(Op::Msize);
        } else if (m == "classify") {
            two_reg(Op::Classify);
        } else if (m == "declassify") {
            two_reg(Op::Declassify);
        } else if (m == "rand") {
            in.op = Op::Rand;
            in.rd = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "copyn") {
            in.op = Op::Copyn;
            in.rd = u8(want_reg(next_tok()));
            in.rs = u8(want_reg(next_tok()));
            in.aux = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "marker") {
            in.op = Op::Marker;
            std::string idt = next_tok();
            i64 id;
            if (!parse_int(idt, id) || id < 0 || id > 127)
                throw AsmError(line_no, "marker id must be 0..127");
            std::string be = next_tok();
            bool begin;
            if (be == "begin")
                begin = true;
            else if (be == "end")
                begin = false;
            else
                throw AsmError(line_no, "marker needs 'begin' or 'end'");
            in.aux = u8(id) | (begin ? 0x80 : 0x00);
            end_of_line();
        } else if (m == "flsave") {
            in.op = Op::FlagSave;
            in.rd = u8(want_reg(next_tok()));
            end_of_line();
        } else if (m == "flrest") {
            in.op = Op::FlagRest;
            in.rs = u8(want_reg(next_tok()));
            end_of_line();
        } else {
            throw AsmError(line_no, strf("unknown mnemonic '", word, "'"));
        }

        lines.push_back(std::move(al));
        for (auto& [name, idx] : pending_labels) {
            if (labels.count(name))
                throw AsmError(line_no, strf("duplicate label '", name, "'"));
            labels[name] = idx;
        }
        pending_labels.clear();
    }
    if (!pending_labels.empty()) {
        // trailing label at end of code: points past the last instruction
        for (auto& [name, idx] : pending_labels)
            labels[name] = lines.size();
    }

    // assign offsets
    u64 off = code_base;
    std::set<u64> starts;
    for (auto& al : lines) {
        al.offset = off;
        starts.insert(off);
        off += encoded_length(al.instr.op);
    }
    u64 code_end = off;
    starts.insert(code_end);

    auto label_addr = [&](const std::string& name, unsigned line) -> u64 {
        auto it = labels.find(name);
        if (it == labels.end())
            throw AsmError(line, strf("undefined label '", name, "'"));
        return it->second < lines.size() ? lines[it->second].offset : code_end;
    };

    // resolve branches
    for (auto& al : lines) {
        if (al.target_label.empty() && al.target_addr < 0)
            continue;
        u64 target = al.target_label.empty() ? u64(al.target_addr)
                                             : label_addr(al.target_label, al.line_no);
        if (target < code_base || target > code_end || !starts.count(target))
            throw AsmError(al.line_no, "misaligned branch target");
        i64 rel = i64(target) - i64(al.offset + encoded_length(al.instr.op));
        if (is_short_jump(al.instr.op)) {
            if (rel < -128 || rel > 127)
                throw AsmError(al.line_no, "short jump target out of range");
        } else if (rel < i64(INT32_MIN) || rel > i64(INT32_MAX)) {
            throw AsmError(al.line_no, "branch displacement out of signed 32-bit range");
        }
        al.instr.imm = rel;
    }

    for (const auto& al : lines) {
        Bytes e = encode(al.instr);
        prog.code.insert(prog.code.end(), e.begin(), e.end());
    }
    for (const auto& [name, idx] : labels)
        prog.symbols[name] = idx < lines.size() ? lines[idx].offset : code_end;

    prog.entry = code_base;
    if (!entry_label.empty())
        prog.entry = label_addr(entry_label, 0);
    if (prog.code.empty())
        fail("empty program");
    return prog;
}

} // namespace cb
