// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "tpshift/weight_plan.hpp"

namespace tpshift::weights {
namespace {

TensorSpec tensor(int hidden, int inter, int experts, TensorRole role = TensorRole::DownProj) {
    return TensorSpec{"t", hidden, inter, experts, 2, role};
}

// Smallest total padding found by exhaustive search over per-boundary pads
// (multiples of element_bytes below one page), pruned by the best total so far.
Bytes brute_force_min_padding(Bytes piece, int grid, const std::vector<int>& tp_set, Bytes page, Bytes step) {
    Bytes best = UINT64_MAX;
    std::vector<bool> edge(grid + 1, false);
    for (int tp : tp_set) {
        for (int k = 1; k <= tp; ++k) {
            edge[k * (grid / tp)] = true;
        }
    }
    std::function<void(int, Bytes, Bytes)> dfs = [&](int j, Bytes offset, Bytes total) {
        if (total >= best) {
            return;
        }
        if (j == grid) {
            best = total;
            return;
        }
        const Bytes end = offset + piece;
        for (Bytes pad = 0; pad < page; pad += step) {
            if (edge[j + 1] && (end + pad) % page != 0) {
                continue;
            }
            dfs(j + 1, end + pad, total + pad);
        }
    };
    dfs(0, 0, 0);
    return best;
}

TEST(PagesPerTensor, TableValuesAreExactRationals) {
    const auto gpt120_up = tensor(2880, 2880, 128, TensorRole::GateUpProj);
    const auto gpt120_down = tensor(2880, 2880, 128);
    EXPECT_EQ(pages_per_tensor(gpt120_down, 1), Rational(2025, 2));
    EXPECT_EQ(pages_per_tensor(gpt120_up, 1), Rational(2025));
    EXPECT_EQ(pages_per_tensor(gpt120_down, 4), Rational(2025, 8));
    EXPECT_EQ(pages_per_tensor(gpt120_up, 4), Rational(2025, 4));
    EXPECT_EQ(pages_per_tensor(tensor(2880, 2880, 32), 1), Rational(2025, 8));
    EXPECT_EQ(pages_per_tensor(tensor(2880, 2880, 32, TensorRole::GateUpProj), 4), Rational(2025, 16));
    EXPECT_EQ(pages_per_tensor(tensor(2880, 2880, 32), 4), Rational(2025, 32));
    EXPECT_EQ(pages_per_tensor(tensor(8192, 28672, 1), 1), Rational(224));
    EXPECT_EQ(pages_per_tensor(tensor(8192, 28672, 1), 4), Rational(56));
    EXPECT_EQ(pages_per_tensor(tensor(5120, 27648, 1), 1), Rational(135));
    EXPECT_EQ(pages_per_tensor(tensor(5120, 27648, 1), 4), Rational(135, 4));
    EXPECT_EQ(to_decimal(Rational(2025, 32)), "63.28125");
    EXPECT_EQ(to_decimal(Rational(224)), "224");
}

TEST(PagesPerTensor, RandomShapesMatchDirectDivision) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 500; ++i) {
        const int h = 64 * (1 + static_cast<int>(rng() % 128));
        const int n = 64 * (1 + static_cast<int>(rng() % 512));
        const int tp = 1 << (rng() % 3);
        const auto t = tensor(h, n, 1);
        const Rational r = pages_per_tensor(t, tp);
        // Cross-multiplied: r * page * tp == bytes.
        EXPECT_EQ(r.numerator() * static_cast<std::int64_t>(2 * MiB) * tp,
                  r.denominator() * static_cast<std::int64_t>(h) * n * 2);
        EXPECT_EQ(is_aligned(t, tp), r.denominator() == 1);
    }
}

TEST(Padding, QwenDownProjectionNeedsOnePage) {
    const auto t = tensor(5120, 27648, 1);
    const auto plan = make_padding_plan(t, {1, 2, 4});
    EXPECT_EQ(plan.total_pad_bytes, 2 * MiB);
    EXPECT_EQ(plan.overhead, Rational(1, 135));
    for (int tp : {1, 2, 4}) {
        for (int i = 0; i < tp; ++i) {
            EXPECT_EQ(plan.shard_offset(tp, i) % (2 * MiB), 0u);
            EXPECT_EQ(plan.shard_length(tp, i) % (2 * MiB), 0u);
        }
    }
}

TEST(Padding, AlignedTensorNeedsNone) {
    const auto plan = make_padding_plan(tensor(8192, 28672, 1), {1, 2, 4});
    EXPECT_EQ(plan.total_pad_bytes, 0u);
}

TEST(Padding, MatchesBruteForceOnSmallPages) {
    std::mt19937_64 rng(11);
    const std::vector<std::vector<int>> sets{{1, 2}, {1, 2, 4}, {2, 4}, {1, 3}, {4}, {2, 3}};
    for (int i = 0; i < 150; ++i) {
        const auto& tp_set = sets[rng() % sets.size()];
        const Bytes page = Bytes{8} << (rng() % 4);  // 8..64 bytes
        const int grid = lcm_of(tp_set);
        const int h = 1 + static_cast<int>(rng() % 7);
        const int n = grid * (1 + static_cast<int>(rng() % 9));
        const auto t = tensor(h, n, 1);
        const auto plan = make_padding_plan(t, tp_set, page);
        const Bytes best = brute_force_min_padding(plan.piece_bytes, grid, tp_set, page, 2);
        ASSERT_EQ(plan.total_pad_bytes, best) << "h=" << h << " n=" << n << " page=" << page;
    }
}

TEST(ScaleUp, InPlaceCopiesNothingWhenAligned) {
    const auto llama = *find_builtin_model("llama-3.1-70b");
    const auto plans = plan_weight_scale_up(llama, 1, 4, false);
    ASSERT_EQ(plans.size(), 80u);
    EXPECT_EQ(plans[0].kind, WeightPlanKind::InPlace);
    EXPECT_EQ(plans[0].copied_bytes, 0u);
    EXPECT_EQ(plans[0].extra_peak_bytes, 0u);
    // Each of 4 workers drops 3/4 of each of 3 tensors (224 pages each).
    EXPECT_EQ(plans[0].freed_pages, 4u * 3u * 168u);
}

TEST(ScaleUp, MisalignedNeedsPaddingOrSwap) {
    const auto qwen = *find_builtin_model("qwen2.5-32b");
    try {
        plan_weight_scale_up(qwen, 1, 4, false, kDefaultPageSize, WeightPlanKind::InPlace);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MisalignedWithoutPadding);
    }
    const auto swap = plan_weight_scale_up(qwen, 1, 4, false);
    EXPECT_EQ(swap[0].kind, WeightPlanKind::PartialSwap);
    EXPECT_GT(swap[0].copied_bytes, 0u);
    const auto padded = plan_weight_scale_up(qwen, 1, 4, true);
    EXPECT_EQ(padded[0].kind, WeightPlanKind::InPlace);
    EXPECT_EQ(padded[0].copied_bytes, 0u);
    // Swapping copies far less than re-laying out the whole model.
    const auto naive = plan_weight_scale_up_naive(qwen, 1, 4);
    EXPECT_LT(swap[0].extra_peak_bytes * 64, naive.extra_peak_bytes);
}

TEST(ScaleUp, NaiveBaselineExtraPeak) {
    const auto qwen = *find_builtin_model("qwen2.5-32b");
    const auto naive = plan_weight_scale_up_naive(qwen, 1, 4);
    EXPECT_NEAR(static_cast<double>(naive.extra_peak_bytes) / 1e9, 15.58, 0.1);
}

TEST(ScaleDown, ReceivesOnlyMissingPart) {
    const auto llama = *find_builtin_model("llama-3.1-70b");
    const auto plans = plan_weight_scale_down(llama, 4, 1, false);
    ASSERT_EQ(plans.size(), 80u);
    const Bytes tensor_bytes = Bytes{8192} * 28672 * 2;
    EXPECT_EQ(plans[0].copied_bytes, 3 * tensor_bytes / 4 * 4 * 3);
    EXPECT_TRUE(plan_weight_scale_down(llama, 2, 2, false).empty());
    EXPECT_THROW(plan_weight_scale_down(llama, 4, 3, false), Error);
}

}  // namespace
}  // namespace tpshift::weights
