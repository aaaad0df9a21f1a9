#pragma once

#include "hash.hpp"
#include "isa.hpp"
#include "layout.hpp"

#include <fstream>
#include <map>
#include <string>
#include <vector>

// Binary program container ("MCT1"). All integers little-endian.
//
//   magic "MCT1" | version u32 | entry u64 | flags u32 | section count u32
//   per section: kind u8 | addr u64 | size u64 | payload
//
// Section kinds 3..7 only appear in hardened programs.

namespace cb {

enum class SectionKind : u8 {
    Code = 1,       // payload: code bytes at addr
    StaticData = 2, // payload: initialized bytes at addr
    Instrument = 3, // payload: code bytes at addr (executable)
    Dispatch = 4,   // payload: n x (offset u64, target u64); break redirects
    Secrets = 5,    // payload: n x (addr u64, len u64); secret static objects
    Meta = 6,       // payload: hardening metadata record
    Premap = 7,     // payload: n x (addr u64, len u64); zero-mapped at load
    SiteMap = 8,    // payload: n x (offset u64, marker id u8)
};

enum class Variant : u8 { Base = 0, Fast = 1, Enhanced = 2 };
enum class PrngKind : u8 { Xs128p = 0, AesRound = 1, Secure = 2, Fixed = 3 };

inline const char* variant_name(Variant v) {
    switch (v) {
    case Variant::Base: return "base";
    case Variant::Fast: return "fast";
    case Variant::Enhanced: return "enhanced";
    }
    return "?";
}

inline const char* prng_name(PrngKind k) {
    switch (k) {
    case PrngKind::Xs128p: return "xs128p";
    case PrngKind::AesRound: return "aesround";
    case PrngKind::Secure: return "secure";
    case PrngKind::Fixed: return "fixed";
    }
    return "?";
}

struct HardenMeta {
    Variant variant = Variant::Base;
    PrngKind prng = PrngKind::Xs128p;
    bool reseed = false;
    u8 anchor_reg = 14;
    u8 aux_reg = 12;
    u8 val_reg = 13;
    u64 seed = 0;
    u64 original_hash = 0;
    u32 site_count = 0;
};

struct Program {
    u64 code_base = layout::CODE_BASE;
    Bytes code;
    std::vector<std::pair<u64, Bytes>> statics;
    u64 entry = layout::CODE_BASE;
    std::map<std::string, u64> symbols; // assembler side info, not serialized

    // Hardened-only sections.
    bool hardened = false;
    u64 instrument_base = 0;
    Bytes instrument;
    std::map<u64, u64> dispatch;               // break offset -> instrument target
    std::vector<std::pair<u64, u64>> secrets;  // static secret objects
    std::vector<std::pair<u64, u64>> premap;   // zero-mapped regions
    std::vector<std::pair<u64, u8>> site_map;  // instrumented offset -> marker id
    HardenMeta meta;

    Bytes serialize() const {
        Bytes out;
        out.insert(out.end(), {'M', 'C', 'T', '1'});
        append_le(out, 1, 4);
        append_le(out, entry, 8);
        append_le(out, hardened ? 1u : 0u, 4);
        u32 count = 1 + u32(statics.size());
        if (hardened)
            count += 5 + u32(premap.empty() ? 0 : 1);
        append_le(out, count, 4);

        auto section = [&](SectionKind k, u64 addr, const Bytes& payload) {
            out.push_back(u8(k));
            append_le(out, addr, 8);
            append_le(out, payload.size(), 8);
            out.insert(out.end(), payload.begin(), payload.end());
        };
        section(SectionKind::Code, code_base, code);
        for (const auto& [addr, bytes] : statics)
            section(SectionKind::StaticData, addr, bytes);
        if (hardened) {
            section(SectionKind::Instrument, instrument_base, instrument);
            Bytes d;
            for (const auto& [off, tgt] : dispatch) {
                append_le(d, off, 8);
                append_le(d, tgt, 8);
            }
            section(SectionKind::Dispatch, 0, d);
            Bytes s;
            for (const auto& [addr, len] : secrets) {
                append_le(s, addr, 8);
                append_le(s, len, 8);
            }
            section(SectionKind::Secrets, 0, s);
            Bytes m;
            m.push_back(u8(meta.variant));
            m.push_back(u8(meta.prng));
            m.push_back(meta.reseed ? 1 : 0);
            m.push_back(meta.anchor_reg);
            m.push_back(meta.aux_reg);
            m.push_back(meta.val_reg);
            append_le(m, meta.seed, 8);
            append_le(m, meta.original_hash, 8);
            append_le(m, meta.site_count, 4);
            section(SectionKind::Meta, 0, m);
            if (!premap.empty()) {
                Bytes p;
                for (const auto& [addr, len] : premap) {
                    append_le(p, addr, 8);
                    append_le(p, len, 8);
                }
                section(SectionKind::Premap, 0, p);
            }
            Bytes sm;
            for (const auto& [off, id] : site_map) {
                append_le(sm, off, 8);
                sm.push_back(id);
            }
            section(SectionKind::SiteMap, 0, sm);
        }
        return out;
    }

    static Program deserialize(const Bytes& in) {
        size_t pos = 0;
        auto need = [&](size_t n) {
            if (pos + n > in.size())
                fail("truncated program container");
        };
        auto rd_u = [&](unsigned w) {
            need(w);
            u64 v = load_le(in.data() + pos, w);
            pos += w;
            return v;
        };
        need(4);
        if (!(in[0] == 'M' && in[1] == 'C' && in[2] == 'T' && in[3] == '1'))
            fail("bad magic, not an MCT1 container");
        pos = 4;
        u64 version = rd_u(4);
        if (version != 1)
            fail("unsupported container version ", version);
        Program p;
        p.entry = rd_u(8);
        u32 flags = u32(rd_u(4));
        p.hardened = flags & 1;
        u32 count = u32(rd_u(4));
        bool have_code = false;
        for (u32 i = 0; i < count; ++i) {
            auto kind = SectionKind(rd_u(1));
            u64 addr = rd_u(8);
            u64 size = rd_u(8);
            need(size);
            const u8* payload = in.data() + pos;
            pos += size;
            switch (kind) {
            case SectionKind::Code:
                p.code_base = addr;
                p.code.assign(payload, payload + size);
                have_code = true;
                break;
            case SectionKind::StaticData:
                p.statics.emplace_back(addr, Bytes(payload, payload + size));
                break;
            case SectionKind::Instrument:
                p.instrument_base = addr;
                p.instrument.assign(payload, payload + size);
                break;
            case SectionKind::Dispatch:
                for (u64 off = 0; off + 16 <= size; off += 16)
                    p.dispatch[load_le(payload + off, 8)] = load_le(payload + off + 8, 8);
                break;
            case SectionKind::Secrets:
                for (u64 off = 0; off + 16 <= size; off += 16)
                    p.secrets.emplace_back(load_le(payload + off, 8), load_le(payload + off + 8, 8));
                break;
            case SectionKind::Meta: {
                if (size < 26)
                    fail("short metadata section");
                p.meta.variant = Variant(payload[0]);
                p.meta.prng = PrngKind(payload[1]);
                p.meta.reseed = payload[2] != 0;
                p.meta.anchor_reg = payload[3];
                p.meta.aux_reg = payload[4];
                p.meta.val_reg = payload[5];
                p.meta.seed = load_le(payload + 6, 8);
                p.meta.original_hash = load_le(payload + 14, 8);
                p.meta.site_count = u32(load_le(payload + 22, 4));
                break;
            }
            case SectionKind::Premap:
                for (u64 off = 0; off + 16 <= size; off += 16)
                    p.premap.emplace_back(load_le(payload + off, 8), load_le(payload + off + 8, 8));
                break;
            case SectionKind::SiteMap:
                for (u64 off = 0; off + 9 <= size; off += 9)
                    p.site_map.emplace_back(load_le(payload + off, 8), payload[off + 8]);
                break;
            default:
                fail("unknown section kind ", unsigned(kind));
            }
        }
        if (!have_code)
            fail("container has no code section");
        return p;
    }

    u64 hash() const { return fnv1a64(serialize()); }

    bool in_code(u64 addr) const {
        if (addr >= code_base && addr < code_base + code.size())
            return true;
        if (hardened && addr >= instrument_base && addr < instrument_base + instrument.size())
            return true;
        return false;
    }

    // Raw view of executable bytes at addr; nullptr outside code sections.
    const u8* code_at(u64 addr, u64* remaining = nullptr) const {
        if (addr >= code_base && addr < code_base + code.size()) {
            if (remaining) *remaining = code_base + code.size() - addr;
            return code.data() + (addr - code_base);
        }
        if (hardened && addr >= instrument_base && addr < instrument_base + instrument.size()) {
            if (remaining) *remaining = instrument_base + instrument.size() - addr;
            return instrument.data() + (addr - instrument_base);
        }
        return nullptr;
    }
};

inline void write_file(const std::string& path, const Bytes& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        fail("cannot open ", path, " for writing");
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
    if (!f)
        fail("write failed: ", path);
}

inline Bytes read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        fail("cannot open ", path);
    Bytes data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return data;
}

} // namespace cb
