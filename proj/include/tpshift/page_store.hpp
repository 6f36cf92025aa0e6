// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tpshift/error.hpp"
#include "tpshift/units.hpp"

namespace tpshift {

enum class PageState : std::uint8_t { Free, MappedWeights, MappedKv, Reserved };

/// What an allocation holds. Reserved pages count against capacity but hold no data.
enum class PageUse : std::uint8_t { Weights, Kv, Reserved };

/// A run of consecutive pages owned by one tag.
struct PageRange {
    std::size_t start_page = 0;
    std::size_t length = 0;
    std::string owner_tag;
    Bytes requested_bytes = 0;  ///< what the caller asked for; the rest is internal fragmentation

    std::size_t end_page() const { return start_page + length; }

    /// Pages [start_page + offset, start_page + offset + count), same owner.
    PageRange subrange(std::size_t offset, std::size_t count) const {
        return PageRange{start_page + offset, count, owner_tag, 0};
    }

    bool operator==(const PageRange& other) const {
        return start_page == other.start_page && length == other.length && owner_tag == other.owner_tag;
    }
};

struct MemoryReport {
    Bytes mapped_weights = 0;
    Bytes mapped_kv = 0;
    Bytes reserved = 0;
    Bytes free = 0;
    Bytes high_water_mark = 0;
    Bytes fragmentation = 0;
};

/**
 * One worker's device memory seen as an ordered array of fixed-size pages.
 *
 * Allocation is first-fit over free runs, lowest page index first, so a
 * sequence of calls always lands on the same pages. The high-water mark
 * tracks mapped bytes (weights + KV); reservations are excluded because they
 * hold no data.
 *
 * Capacity that is not a whole number of pages is truncated to the last full page.
 */
class PageSpace {
public:
    explicit PageSpace(Bytes capacity_bytes, Bytes page_size = kDefaultPageSize)
        : page_size_(page_size) {
        if (page_size == 0) {
            throw Error(ErrorCode::InvalidRange, "page size must be positive");
        }
        states_.assign(capacity_bytes / page_size, PageState::Free);
        owners_.assign(states_.size(), kNoOwner);
        free_pages_ = states_.size();
    }

    Bytes page_size() const { return page_size_; }
    std::size_t page_count() const { return states_.size(); }
    Bytes capacity_bytes() const { return page_count() * page_size_; }

    PageState state(std::size_t page) const { return states_.at(page); }

    /// Owner tag of a page, empty when free.
    const std::string& owner(std::size_t page) const {
        static const std::string empty;
        auto id = owners_.at(page);
        return id == kNoOwner ? empty : tags_[id];
    }

    std::size_t free_pages() const { return free_pages_; }
    std::size_t mapped_pages() const { return weight_pages_ + kv_pages_; }
    std::size_t reserved_pages() const { return reserved_pages_; }
    Bytes mapped_bytes() const { return mapped_pages() * page_size_; }
    Bytes free_bytes() const { return free_pages_ * page_size_; }
    Bytes high_water_mark() const { return high_water_pages_ * page_size_; }

    std::size_t pages_for(Bytes bytes) const { return static_cast<std::size_t>(ceil_div(bytes, page_size_)); }

    /// Maps ceil(bytes / page_size) consecutive pages for `tag`.
    PageRange alloc(Bytes bytes, const std::string& tag, PageUse use = PageUse::Kv) {
        if (bytes == 0) {
            throw Error(ErrorCode::InvalidRange, "zero-byte allocation for '" + tag + "'");
        }
        const std::size_t need = pages_for(bytes);
        const std::size_t start = find_free_run(need);
        if (start == npos) {
            throw Error(ErrorCode::OutOfMemory, "cannot map " + std::to_string(need) + " pages for '" + tag +
                                                    "' (" + std::to_string(free_pages_) + " free)");
        }
        const auto tag_id = intern(tag);
        const PageState st = use == PageUse::Weights ? PageState::MappedWeights
                             : use == PageUse::Kv    ? PageState::MappedKv
                                                     : PageState::Reserved;
        for (std::size_t p = start; p < start + need; ++p) {
            states_[p] = st;
            owners_[p] = tag_id;
        }
        count(st, static_cast<std::ptrdiff_t>(need));
        free_pages_ -= need;
        auto& live = live_[tag_id];
        live.pages += need;
        live.fragmentation += need * page_size_ - bytes;
        fragmentation_ += need * page_size_ - bytes;
        return PageRange{start, need, tag, bytes};
    }

    PageRange reserve(Bytes bytes, const std::string& tag) { return alloc(bytes, tag, PageUse::Reserved); }

    /// Returns the pages of `range` to the free list. Every page must be in use by the range's tag.
    std::size_t unmap(const PageRange& range) {
        if (range.length == 0 || range.end_page() > states_.size()) {
            throw Error(ErrorCode::InvalidRange, "range out of bounds for '" + range.owner_tag + "'");
        }
        auto it = tag_ids_.find(range.owner_tag);
        if (it == tag_ids_.end()) {
            throw Error(ErrorCode::InvalidRange, "unknown owner '" + range.owner_tag + "'");
        }
        const auto tag_id = it->second;
        for (std::size_t p = range.start_page; p < range.end_page(); ++p) {
            if (states_[p] == PageState::Free) {
                throw Error(ErrorCode::InvalidRange, "page " + std::to_string(p) + " already free");
            }
            if (owners_[p] != tag_id) {
                throw Error(ErrorCode::InvalidRange, "page " + std::to_string(p) + " owned by '" + tags_[owners_[p]] +
                                                         "', not '" + range.owner_tag + "'");
            }
        }
        for (std::size_t p = range.start_page; p < range.end_page(); ++p) {
            count(states_[p], -1);
            states_[p] = PageState::Free;
            owners_[p] = kNoOwner;
        }
        free_pages_ += range.length;
        first_free_hint_ = std::min(first_free_hint_, range.start_page);
        auto& live = live_[tag_id];
        live.pages -= range.length;
        if (live.pages == 0) {
            fragmentation_ -= live.fragmentation;
            live_.erase(tag_id);
        }
        return range.length;
    }

    MemoryReport memory_report() const {
        return MemoryReport{weight_pages_ * page_size_, kv_pages_ * page_size_, reserved_pages_ * page_size_,
                            free_pages_ * page_size_,   high_water_mark(),      fragmentation_};
    }

    /// Pages currently owned by `tag`, grouped into maximal consecutive runs.
    std::vector<PageRange> ranges_of(const std::string& tag) const {
        std::vector<PageRange> out;
        auto it = tag_ids_.find(tag);
        if (it == tag_ids_.end()) {
            return out;
        }
        for (std::size_t p = 0; p < owners_.size(); ++p) {
            if (owners_[p] != it->second) {
                continue;
            }
            if (!out.empty() && out.back().end_page() == p) {
                ++out.back().length;
            } else {
                out.push_back(PageRange{p, 1, tag, 0});
            }
        }
        return out;
    }

private:
    static constexpr std::uint32_t kNoOwner = UINT32_MAX;
    static constexpr std::size_t npos = SIZE_MAX;

    struct LiveTag {
        std::size_t pages = 0;
        Bytes fragmentation = 0;
    };

    std::uint32_t intern(const std::string& tag) {
        auto [it, inserted] = tag_ids_.try_emplace(tag, static_cast<std::uint32_t>(tags_.size()));
        if (inserted) {
            tags_.push_back(tag);
        }
        return it->second;
    }

    void count(PageState st, std::ptrdiff_t delta) {
        switch (st) {
        case PageState::MappedWeights: weight_pages_ += delta; break;
        case PageState::MappedKv: kv_pages_ += delta; break;
        case PageState::Reserved: reserved_pages_ += delta; break;
        case PageState::Free: break;
        }
        high_water_pages_ = std::max(high_water_pages_, mapped_pages());
    }

    std::size_t find_free_run(std::size_t need) {
        if (need > free_pages_) {
            return npos;
        }
        while (first_free_hint_ < states_.size() && states_[first_free_hint_] != PageState::Free) {
            ++first_free_hint_;
        }
        std::size_t run_start = first_free_hint_;
        std::size_t run_len = 0;
        for (std::size_t p = first_free_hint_; p < states_.size(); ++p) {
            if (states_[p] == PageState::Free) {
                if (run_len == 0) {
                    run_start = p;
                }
                if (++run_len == need) {
                    return run_start;
                }
            } else {
                run_len = 0;
            }
        }
        return npos;
    }

    Bytes page_size_;
    std::vector<PageState> states_;
    std::vector<std::uint32_t> owners_;
    std::vector<std::string> tags_;
    std::unordered_map<std::string, std::uint32_t> tag_ids_;
    std::unordered_map<std::uint32_t, LiveTag> live_;
    std::size_t free_pages_ = 0;
    std::size_t weight_pages_ = 0;
    std::size_t kv_pages_ = 0;
    std::size_t reserved_pages_ = 0;
    std::size_t high_water_pages_ = 0;
    std::size_t first_free_hint_ = 0;
    Bytes fragmentation_ = 0;
};

}  // namespace tpshift
