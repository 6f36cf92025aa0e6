// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <map>
#include <random>

#include <gtest/gtest.h>

#include "tpshift/page_store.hpp"

namespace tpshift {
namespace {

// Page-bitmap oracle: owner per page, first-fit by linear scan.
struct BitmapOracle {
    std::vector<int> owner;  // -1 free
    explicit BitmapOracle(std::size_t pages) : owner(pages, -1) {}

    std::optional<std::size_t> alloc(std::size_t need, int id) {
        std::size_t run = 0;
        for (std::size_t p = 0; p < owner.size(); ++p) {
            run = owner[p] < 0 ? run + 1 : 0;
            if (run == need) {
                for (std::size_t q = p + 1 - need; q <= p; ++q) {
                    owner[q] = id;
                }
                return p + 1 - need;
            }
        }
        return std::nullopt;
    }
    std::size_t used() const { return std::count_if(owner.begin(), owner.end(), [](int o) { return o >= 0; }); }
};

TEST(PageSpace, CapacityTruncatesToWholePages) {
    PageSpace s(10 * MiB + 123, 2 * MiB);
    EXPECT_EQ(s.page_count(), 5u);
    EXPECT_EQ(s.free_pages(), 5u);
    EXPECT_EQ(s.capacity_bytes(), 10 * MiB);
}

TEST(PageSpace, AllocRoundsUpAndTracksFragmentation) {
    PageSpace s(16 * MiB, 2 * MiB);
    auto r = s.alloc(3 * MiB, "a");
    EXPECT_EQ(r.start_page, 0u);
    EXPECT_EQ(r.length, 2u);
    EXPECT_EQ(s.memory_report().fragmentation, 1 * MiB);
    EXPECT_EQ(s.state(0), PageState::MappedKv);
    EXPECT_EQ(s.owner(1), "a");
    s.unmap(r);
    EXPECT_EQ(s.memory_report().fragmentation, 0u);
}

TEST(PageSpace, WeightShareOfQwenOnH20) {
    PageSpace s(gb_to_bytes(96.0));
    auto w = s.alloc(gb_to_bytes(62.34), "weights", PageUse::Weights);
    EXPECT_EQ(s.page_count(), 45776u);
    EXPECT_EQ(w.length, 29727u);
    const double share = static_cast<double>(s.memory_report().mapped_weights) / static_cast<double>(s.capacity_bytes());
    EXPECT_NEAR(share, 0.649, 0.001);
}

TEST(PageSpace, Errors) {
    PageSpace s(8 * MiB, 2 * MiB);
    EXPECT_THROW(PageSpace(8 * MiB, 0), Error);
    try {
        s.alloc(0, "z");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidRange);
    }
    auto a = s.alloc(4 * MiB, "a");
    auto b = s.alloc(4 * MiB, "b");
    try {
        s.alloc(1, "c");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::OutOfMemory);
    }
    PageRange wrong = a;
    wrong.owner_tag = "b";
    try {
        s.unmap(wrong);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidRange);
    }
    s.unmap(a);
    try {
        s.unmap(a);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidRange);
    }
    EXPECT_EQ(s.unmap(b.subrange(1, 1)), 1u);
    EXPECT_EQ(s.ranges_of("b").size(), 1u);
    EXPECT_EQ(s.ranges_of("b")[0].length, 1u);
}

TEST(PageSpace, ReservationsCountAgainstCapacityButNotHighWater) {
    PageSpace s(8 * MiB, 2 * MiB);
    s.reserve(4 * MiB, "r");
    EXPECT_EQ(s.reserved_pages(), 2u);
    EXPECT_EQ(s.high_water_mark(), 0u);
    s.alloc(2 * MiB, "k");
    EXPECT_EQ(s.high_water_mark(), 2 * MiB);
    EXPECT_EQ(s.free_pages(), 1u);
}

TEST(PageSpace, MatchesBitmapOracleUnderRandomChurn) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t pages = 8 + rng() % 120;
        PageSpace s(pages * 4 * KiB, 4 * KiB);
        BitmapOracle oracle(pages);
        std::map<int, PageRange> live;
        std::size_t peak = 0;
        for (int step = 0; step < 300; ++step) {
            if (live.empty() || rng() % 3 != 0) {
                const std::size_t need = 1 + rng() % 9;
                const Bytes bytes = need * 4 * KiB - rng() % (4 * KiB);
                const int id = step;
                auto expect = oracle.alloc(need, id);
                if (!expect) {
                    EXPECT_THROW(s.alloc(bytes, "t" + std::to_string(id)), Error);
                    continue;
                }
                auto r = s.alloc(bytes, "t" + std::to_string(id));
                ASSERT_EQ(r.start_page, *expect);
                ASSERT_EQ(r.length, need);
                live[id] = r;
            } else {
                auto it = std::next(live.begin(), static_cast<long>(rng() % live.size()));
                s.unmap(it->second);
                for (auto& o : oracle.owner) {
                    if (o == it->first) {
                        o = -1;
                    }
                }
                live.erase(it);
            }
            peak = std::max(peak, oracle.used());
            ASSERT_EQ(s.mapped_pages(), oracle.used());
            ASSERT_EQ(s.free_pages() + s.mapped_pages(), s.page_count());
            ASSERT_EQ(s.high_water_mark(), peak * 4 * KiB);
            for (std::size_t p = 0; p < pages; ++p) {
                ASSERT_EQ(s.state(p) == PageState::Free, oracle.owner[p] < 0);
            }
        }
    }
}

}  // namespace
}  // namespace tpshift
