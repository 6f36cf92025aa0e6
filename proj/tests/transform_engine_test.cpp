// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <map>
#include <random>

#include <gtest/gtest.h>

#include "tpshift/transform_engine.hpp"

namespace tpshift::transform {
namespace {

// Small model with the same structure as the served ones; shards are not page-aligned at 4 KiB.
ModelConfig toy_model(int layers, int inter = 2080) {
    ModelConfig m;
    m.name = "toy";
    m.hidden_size = 64;
    m.inter_size = inter;
    m.num_layers = layers;
    m.num_kv_heads = 8;
    m.head_dim = 16;
    m.element_bytes = 2;
    m.weights_gb = 3.0 * 64 * inter * 2 * layers / 1e9 * 1.1;
    return m;
}

constexpr Bytes kPage = 4 * KiB;

GroupState toy_group(const ModelConfig& m, int workers, int tp, Bytes capacity = Bytes{256} << 20, bool padded = true,
                     int tokens_per_block = 16) {
    return make_group(m, workers, tp, capacity, kPage, kv_layout_for(m, tokens_per_block), padded);
}

void add_balanced(GroupState& g, int per_instance, int tokens) {
    const int instances = g.workers() / *g.uniform_tp();
    int id = 0;
    for (int i = 0; i < instances; ++i) {
        for (int r = 0; r < per_instance; ++r) {
            add_request(g, id++, tokens, i);
        }
    }
}

TEST(BuildPlan, SameDegreeIsEmpty) {
    auto g = toy_group(toy_model(4), 2, 1);
    const auto p = build_plan(g, 1, 1, CostModel{});
    EXPECT_TRUE(p.empty());
    EXPECT_EQ(transformation_cost_summary(p, CostModel{}).total_stall, 0.0);
    const auto r = execute_plan(p, g);
    EXPECT_TRUE(r.finished);
    EXPECT_EQ(r.completed_layers, 0);
}

TEST(BuildPlan, SixtyFourLayerScaleUpOrder) {
    auto g = toy_group(toy_model(64), 4, 1, Bytes{64} << 20);
    add_balanced(g, 1, 40);
    const auto p = build_plan(g, 1, 4, CostModel{}, 1);
    ASSERT_EQ(p.steps.size(), 128u);
    EXPECT_EQ(p.steps[0].layer, 64);
    EXPECT_EQ(p.steps[0].phase, Phase::Mlp);
    EXPECT_EQ(p.steps[1].layer, 64);
    EXPECT_EQ(p.steps[1].phase, Phase::Kv);
    EXPECT_EQ(p.steps[127].layer, 1);
    EXPECT_EQ(p.steps[127].earliest_step, 63);
    EXPECT_TRUE(check_plan(p).empty());
}

TEST(BuildPlan, OrderingHoldsForRandomShapes) {
    std::mt19937_64 rng(21);
    const std::vector<std::pair<int, int>> pairs{{1, 2}, {1, 4}, {2, 4}, {2, 1}, {4, 1}, {4, 2}};
    for (int i = 0; i < 12; ++i) {
        const int layers = 1 + static_cast<int>(rng() % 128);
        const auto [from, to] = pairs[rng() % pairs.size()];
        const int stagger = 1 + static_cast<int>(rng() % 8);
        auto g = toy_group(toy_model(layers, 512), 4, from, Bytes{32} << 20);
        const auto p = build_plan(g, from, to, CostModel{}, stagger);
        ASSERT_EQ(p.steps.size(), 2u * layers);
        const auto problems = check_plan(p);
        EXPECT_TRUE(problems.empty()) << problems.front();
    }
}

TEST(BuildPlan, CheckerCatchesBadOrders) {
    auto g = toy_group(toy_model(3), 2, 1);
    auto p = build_plan(g, 1, 2, CostModel{}, 1);
    auto swapped = p;
    std::swap(swapped.steps[0], swapped.steps[1]);
    EXPECT_FALSE(check_plan(swapped).empty());
    auto ascending = p;
    std::reverse(ascending.steps.begin(), ascending.steps.end());
    EXPECT_FALSE(check_plan(ascending).empty());
    auto crowded = p;
    for (auto& s : crowded.steps) {
        s.earliest_step = 0;
    }
    EXPECT_FALSE(check_plan(crowded).empty());
}

TEST(BuildPlan, IncompatibleGroups) {
    auto g = toy_group(toy_model(2), 2, 1);
    try {
        build_plan(g, 1, 4, CostModel{});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IncompatibleGroup);
    }
    EXPECT_THROW(build_plan(g, 2, 4, CostModel{}), Error);
    CostModel bad;
    bad.overlap_fraction = 1.5;
    EXPECT_THROW(build_plan(g, 1, 2, bad), std::invalid_argument);
}

TEST(Cost, StallFollowsOverlapAndBandwidth) {
    auto g = toy_group(toy_model(4), 4, 1, Bytes{64} << 20, false);
    add_balanced(g, 2, 100);
    double previous = 1e9;
    for (double overlap : {0.0, 0.5, 0.9, 0.99, 1.0}) {
        CostModel c;
        c.overlap_fraction = overlap;
        const auto p = build_plan(g, 1, 4, c);
        const auto s = transformation_cost_summary(p, c);
        EXPECT_LE(s.total_stall, previous);
        EXPECT_NEAR(s.total_stall, p.total_stall(), 1e-15);
        previous = s.total_stall;
        if (overlap == 1.0) {
            EXPECT_EQ(s.total_stall, 0.0);
        }
    }
    previous = 1e9;
    for (double bw : {1e9, 1e10, 1e11}) {
        CostModel c;
        c.interconnect_bandwidth = bw;
        const double stall = build_plan(g, 1, 4, c).total_stall();
        EXPECT_LT(stall, previous);
        previous = stall;
    }
}

TEST(Cost, InPlaceWeightsMoveNothingAndBeatBaselines) {
    const auto m = toy_model(6);
    CostModel c;
    auto padded = toy_group(m, 4, 1, Bytes{64} << 20, true);
    auto unpadded = toy_group(m, 4, 1, Bytes{64} << 20, false);
    add_balanced(padded, 2, 100);
    add_balanced(unpadded, 2, 100);
    const auto a = transformation_cost_summary(build_plan(padded, 1, 4, c, 1, 1), c);
    const auto b = transformation_cost_summary(build_plan(unpadded, 1, 4, c, 1, 1), c);
    EXPECT_EQ(a.weight_bytes_moved, 0u);
    EXPECT_GT(b.weight_bytes_moved, 0u);
    EXPECT_LT(a.total_stall, b.total_stall);

    // Same requests under a token-first layout need the trim pass.
    auto token_first =
        make_group(m, 4, 1, Bytes{64} << 20, kPage, kv::KvLayout::page_friendly(16, 8, 16, 2), true);
    add_balanced(token_first, 2, 100);
    const auto t = transformation_cost_summary(build_plan(token_first, 1, 4, c, 1, 1), c);
    EXPECT_GT(t.kv_bytes_moved, a.kv_bytes_moved);
    EXPECT_LT(a.total_stall, t.total_stall);
}

TEST(Cost, EstimateMatchesPlanOnBalancedGroups) {
    const auto m = toy_model(5);
    CostModel c;
    for (bool padded : {true, false}) {
        auto g = toy_group(m, 4, 1, Bytes{64} << 20, padded);
        add_balanced(g, 3, 64);
        const auto exact = transformation_cost_summary(build_plan(g, 1, 4, c, 1, 4), c);
        const auto est = estimate_transformation(m, 1, 4, {{64, 64, 64}, {64, 64, 64}, {64, 64, 64}, {64, 64, 64}},
                                                 c, 4, padded, 16, kPage);
        EXPECT_EQ(est.weight_bytes_moved, exact.weight_bytes_moved);
        EXPECT_EQ(est.kv_bytes_moved, exact.kv_bytes_moved);
        EXPECT_NEAR(est.total_stall, exact.total_stall, 1e-12);
    }
}

TEST(Execute, StaggeredScaleUpPeakStaysWithinOneLayerBuffer) {
    const auto m = toy_model(8);
    auto g = toy_group(m, 4, 1, Bytes{64} << 20);
    add_balanced(g, 3, 120);
    const auto p = build_plan(g, 1, 4, CostModel{}, 1, 8);
    Bytes layer_buffer = 0;
    for (const auto& s : p.steps) {
        if (s.phase == Phase::Kv) {
            layer_buffer = std::max(layer_buffer, std::get<kv::MigrationPlan>(s.plan).max_peak_extra_bytes());
        }
    }
    const auto r = execute_plan(p, g);
    EXPECT_TRUE(r.finished);
    EXPECT_EQ(r.completed_layers, 8);
    for (Bytes inc : r.high_water_increase) {
        EXPECT_LE(inc, layer_buffer);
    }
    EXPECT_EQ(g.uniform_tp(), 4);
}

TEST(Execute, ScaleDownStaggerBoundsPerStepAllocation) {
    const int layers = 12;
    const auto m = toy_model(layers);
    auto start = toy_group(m, 4, 4, Bytes{64} << 20);
    add_balanced(start, 4, 64);
    const auto all_at_once = build_plan(start, 4, 1, CostModel{}, layers);
    const auto one_by_one = build_plan(start, 4, 1, CostModel{}, 1);
    EXPECT_EQ(all_at_once.max_peak_extra_bytes(), layers * one_by_one.max_peak_extra_bytes());
}

TEST(Execute, LayersSwitchOnceAtTheMovingBoundary) {
    const auto m = toy_model(10);
    auto g = toy_group(m, 2, 1, Bytes{64} << 20);
    add_balanced(g, 1, 50);
    const auto p = build_plan(g, 1, 2, CostModel{}, 2);
    const auto r = execute_plan(p, g, 100, 102);
    EXPECT_FALSE(r.finished);
    EXPECT_EQ(r.completed_layers, 6);
    for (int l = 1; l <= 10; ++l) {
        EXPECT_EQ(g.layer_tp[l - 1], l > 4 ? 2 : 1) << "layer " << l;
    }
    ASSERT_EQ(r.stall_schedule.size(), 3u);
    EXPECT_EQ(r.stall_schedule.front().first, 100);
}

TEST(Execute, OutOfMemoryRollsBackTheFailingLayer) {
    const auto m = toy_model(6);
    // Splitting grows every worker's weights and KV, layer by layer, until the device is full.
    auto probe = toy_group(m, 4, 4, Bytes{64} << 20);
    add_balanced(probe, 3, 60);
    const Bytes before = probe.spaces[0].mapped_bytes();
    const auto p = build_plan(probe, 4, 1, CostModel{}, 1, 2);
    auto grown = probe;
    execute_plan(p, grown);
    const Bytes per_layer = (grown.spaces[0].mapped_bytes() - before) / 6;
    ASSERT_GT(per_layer, 0u);

    auto g = toy_group(m, 4, 4, round_up(before + per_layer * 7 / 2, kPage));
    add_balanced(g, 3, 60);
    std::vector<std::vector<kv::Cell>> cells;
    for (const auto& layer : g.kv) {
        cells.push_back(kv::cells_of(layer));
    }
    bool threw = false;
    try {
        execute_plan(p, g);
    } catch (const Error& e) {
        threw = true;
        EXPECT_TRUE(e.code() == ErrorCode::OutOfMemory || e.code() == ErrorCode::InsufficientStageBuffer);
    }
    EXPECT_TRUE(threw);
    int done = 0;
    for (int l = 0; l < m.num_layers; ++l) {
        EXPECT_EQ(kv::cells_of(g.kv[l]), cells[l]);
        const int tp = g.layer_tp[l];
        done += tp == 1 ? 1 : 0;
        if (tp == 4) {
            for (int w = 0; w < 4; ++w) {
                for (const auto& b : g.kv[l][w].blocks()) {
                    EXPECT_EQ(b.headers, kv::retained_headers(w + 1, 8, 4)) << "layer " << l + 1;
                }
            }
        } else {
            // Every request's tokens sit whole on a single worker.
            for (int w = 0; w < 4; ++w) {
                std::map<std::pair<int, int>, int> heads;
                for (const auto& b : g.kv[l][w].blocks()) {
                    for (int t = b.first_token; t < b.first_token + b.token_count; ++t) {
                        heads[{b.request, t}] += b.headers.size();
                    }
                }
                for (const auto& [key, n] : heads) {
                    EXPECT_EQ(n, 8);
                }
            }
        }
    }
    EXPECT_GT(done, 0);
    EXPECT_LT(done, 6);
    // Completed layers are the top ones.
    for (int l = 0; l + 1 < m.num_layers; ++l) {
        EXPECT_LE(g.layer_tp[l + 1], g.layer_tp[l]);
    }
}

}  // namespace
}  // namespace tpshift::transform
