#pragma once

#include "layout.hpp"

#include <array>
#include <map>
#include <unordered_map>

namespace cb {

// Byte-addressable sparse memory. Mapping is tracked as coalesced intervals;
// pages materialize zero-filled on first write. Reads of unmapped addresses
// are errors at the interpreter level (no silent zero pages).
class SparseMemory {
public:
    static constexpr u64 PAGE = layout::PAGE;

    void map_range(u64 addr, u64 len) {
        if (len == 0)
            return;
        u64 lo = addr, hi = addr + len;
        auto it = ranges_.upper_bound(lo);
        if (it != ranges_.begin()) {
            auto prev = std::prev(it);
            if (prev->second >= lo) {
                lo = prev->first;
                hi = std::max(hi, prev->second);
                it = ranges_.erase(prev);
            }
        }
        while (it != ranges_.end() && it->first <= hi) {
            hi = std::max(hi, it->second);
            it = ranges_.erase(it);
        }
        ranges_[lo] = hi;
    }

    void unmap_range(u64 addr, u64 len) {
        if (len == 0)
            return;
        u64 lo = addr, hi = addr + len;
        auto it = ranges_.upper_bound(lo);
        if (it != ranges_.begin())
            --it;
        std::vector<std::pair<u64, u64>> keep;
        while (it != ranges_.end() && it->first < hi) {
            u64 a = it->first, b = it->second;
            if (b <= lo) {
                ++it;
                continue;
            }
            it = ranges_.erase(it);
            if (a < lo)
                keep.emplace_back(a, lo);
            if (b > hi)
                keep.emplace_back(hi, b);
        }
        for (auto& [a, b] : keep)
            ranges_[a] = b;
        for (u64 p = layout::align_down(lo, PAGE); p < hi; p += PAGE)
            pages_.erase(p); // dropped content; remap sees zeros
    }

    bool is_mapped(u64 addr, u64 len) const {
        if (len == 0)
            return true;
        auto it = ranges_.upper_bound(addr);
        if (it == ranges_.begin())
            return false;
        --it;
        return addr >= it->first && addr + len <= it->second;
    }

    u8 read_byte(u64 addr) const {
        auto it = pages_.find(layout::align_down(addr, PAGE));
        if (it == pages_.end())
            return 0;
        return it->second[addr & (PAGE - 1)];
    }

    void write_byte(u64 addr, u8 v) {
        u64 key = layout::align_down(addr, PAGE);
        auto it = pages_.find(key);
        if (it == pages_.end())
            it = pages_.emplace(key, Page{}).first;
        it->second[addr & (PAGE - 1)] = v;
    }

    u64 read(u64 addr, unsigned width) const {
        u64 v = 0;
        for (unsigned i = 0; i < width; ++i)
            v |= u64(read_byte(addr + i)) << (8 * i);
        return v;
    }

    void write(u64 addr, u64 v, unsigned width) {
        for (unsigned i = 0; i < width; ++i)
            write_byte(addr + i, u8(v >> (8 * i)));
    }

    Bytes read_block(u64 addr, u64 len) const {
        Bytes out(len);
        for (u64 i = 0; i < len; ++i)
            out[i] = read_byte(addr + i);
        return out;
    }

    void write_block(u64 addr, const u8* data, u64 len) {
        for (u64 i = 0; i < len; ++i)
            write_byte(addr + i, data[i]);
    }

    const std::map<u64, u64>& mapped_ranges() const { return ranges_; }

private:
    using Page = std::array<u8, PAGE>;
    std::map<u64, u64> ranges_;
    std::unordered_map<u64, Page> pages_;
};

} // namespace cb
