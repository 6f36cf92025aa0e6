// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "tpshift/sim_harness.hpp"

namespace tpshift::sim {
namespace {

std::vector<Request> parse(const std::string& text) {
    std::istringstream in(text);
    return parse_trace(in);
}

ClusterConfig cluster(int gpus, int tp, bool transformations) {
    ClusterConfig c;
    c.hosts = 1;
    c.gpus_per_host = gpus;
    c.initial_tp = tp;
    c.transformations_enabled = transformations;
    return c;
}

RunResult simulate(const std::vector<Request>& trace, const ClusterConfig& c, sched::Policy p = sched::Policy::Gyges) {
    sched::SchedulerConfig sc;
    sc.policy = p;
    return run(trace, c, sched::PerfModel{}, sc, transform::CostModel{});
}

TEST(Trace, ParsesUnquotedKeysAndComments) {
    const auto t = parse(
        "# header comment\n"
        "{arrival_ms:0, input_tokens:1024, output_tokens:128}\n"
        "\n"
        "  {\"arrival_ms\": 1500, \"input_tokens\": 10, \"output_tokens\": 2}\n");
    ASSERT_EQ(t.size(), 2u);
    EXPECT_EQ(t[0].input_tokens, 1024);
    EXPECT_EQ(t[0].output_tokens, 128);
    EXPECT_DOUBLE_EQ(t[1].arrival_time, 1.5);
    EXPECT_EQ(t[1].id, 1);
}

TEST(Trace, SortsStablyByArrival) {
    const auto t = parse(
        "{arrival_ms:20, input_tokens:1, output_tokens:1}\n"
        "{arrival_ms:10, input_tokens:2, output_tokens:1}\n"
        "{arrival_ms:10, input_tokens:3, output_tokens:1}\n");
    ASSERT_EQ(t.size(), 3u);
    EXPECT_EQ(t[0].input_tokens, 2);
    EXPECT_EQ(t[1].input_tokens, 3);
    EXPECT_EQ(t[2].input_tokens, 1);
    for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_EQ(t[i].id, static_cast<int>(i));
    }
}

TEST(Trace, ReportsLineOfBadRecord) {
    const std::vector<std::pair<std::string, std::size_t>> cases = {
        {"{arrival_ms:0, input_tokens:1, output_tokens:1}\n{arrival_ms:x, input_tokens:1, output_tokens:1}\n", 2},
        {"# c\n{arrival_ms:0, input_tokens:1}\n", 2},
        {"{arrival_ms:-5, input_tokens:1, output_tokens:1}\n", 1},
        {"{arrival_ms:0, input_tokens:0, output_tokens:1}\n", 1},
        {"{arrival_ms:0, input_tokens:1.5, output_tokens:1}\n", 1},
        {"{arrival_ms:0, input_tokens:1, output_tokens:1, priority:3}\n", 1},
        {"arrival_ms:0, input_tokens:1, output_tokens:1\n", 1},
    };
    for (const auto& [text, line] : cases) {
        try {
            parse(text);
            ADD_FAILURE() << "accepted: " << text;
        } catch (const ParseError& e) {
            EXPECT_EQ(e.line(), line) << text;
        }
    }
}

TEST(Trace, EmptyTraceIsAnError) {
    try {
        parse("# nothing\n\n");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyTrace);
    }
    EXPECT_THROW(load_trace("/nonexistent/trace.txt"), Error);
}

TEST(Synthetic, DeterministicAndNearNominalRates) {
    SyntheticConfig c;
    c.short_rate = 60.0;
    c.long_rate = 6.0;
    c.duration_s = 3000.0;
    const auto a = gen_synthetic(c);
    const auto b = gen_synthetic(c);
    ASSERT_EQ(a.size(), b.size());
    int shorts = 0;
    int longs = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].arrival_time, b[i].arrival_time);
        EXPECT_EQ(a[i].id, static_cast<int>(i));
        EXPECT_LT(a[i].arrival_time, c.duration_s);
        if (i > 0) {
            EXPECT_LE(a[i - 1].arrival_time, a[i].arrival_time);
        }
        (a[i].input_tokens == c.short_len ? shorts : longs)++;
    }
    // Poisson counts: mean 3000 and 300; five standard deviations.
    EXPECT_NEAR(shorts, 3000, 5 * std::sqrt(3000.0));
    EXPECT_NEAR(longs, 300, 5 * std::sqrt(300.0));
    EXPECT_EQ(a.front().output_tokens, output_for(a.front().input_tokens, 0.103));

    c.seed += 1;
    EXPECT_NE(gen_synthetic(c).front().arrival_time, a.front().arrival_time);
}

TEST(Simulation, SingleRequestLatencyMatchesRates) {
    const auto trace = parse("{arrival_ms:1000, input_tokens:896, output_tokens:101}\n");
    const auto r = simulate(trace, cluster(1, 1, false));
    const auto& m = r.metrics.requests.at(0);
    ASSERT_TRUE(m.completed_s.has_value());
    EXPECT_EQ(m.placed_instance, 0);
    EXPECT_NEAR(*m.ttft_s, 896.0 / 448.0, 1e-9);
    EXPECT_NEAR(*m.tpot_s, 1.0 / 448.0, 1e-9);
    EXPECT_NEAR(*m.completed_s, 1.0 + (896.0 + 100.0) / 448.0, 1e-9);
    EXPECT_NEAR(r.metrics.tokens_processed, 996.0, 1e-6);
}

// Two equal requests arriving together: FCFS prefill, then shared decode.
TEST(Simulation, PrefillPriorityThenSharedDecode) {
    const auto trace = parse(
        "{arrival_ms:0, input_tokens:448, output_tokens:449}\n"
        "{arrival_ms:0, input_tokens:448, output_tokens:449}\n");
    const auto r = simulate(trace, cluster(1, 1, false));
    const auto& a = r.metrics.requests[0];
    const auto& b = r.metrics.requests[1];
    EXPECT_NEAR(*a.ttft_s, 1.0, 1e-9);
    EXPECT_NEAR(*b.ttft_s, 2.0, 1e-9);
    // Decode waits while b prefills; from t=2 each gets 224 tps for its 448 remaining tokens.
    EXPECT_NEAR(*a.completed_s, 4.0, 1e-9);
    EXPECT_NEAR(*b.completed_s, 4.0, 1e-9);
    EXPECT_NEAR(*a.tpot_s, 3.0 / 448.0, 1e-9);
}

TEST(Simulation, OutputBeyondReservationExtendsKv) {
    // Expected output of 1000 input tokens is 115; this request emits 400.
    const auto trace = parse("{arrival_ms:0, input_tokens:1000, output_tokens:400}\n");
    const auto r = simulate(trace, cluster(1, 1, false));
    const auto& m = r.metrics.requests[0];
    ASSERT_TRUE(m.completed_s.has_value());
    EXPECT_NEAR(*m.completed_s, 1399.0 / 448.0, 1e-9);
    EXPECT_EQ(r.event_log.find("truncate"), std::string::npos);
}

TEST(Simulation, LongRequestRejectedWithoutTransformations) {
    const auto trace = parse("{arrival_ms:0, input_tokens:51200, output_tokens:10}\n");
    const auto r = simulate(trace, cluster(8, 1, false));
    EXPECT_TRUE(r.metrics.requests[0].rejected);
    EXPECT_FALSE(r.metrics.requests[0].completed_s.has_value());
}

TEST(Simulation, LongRequestTriggersMergeAndCompletes) {
    const auto trace = parse("{arrival_ms:0, input_tokens:51200, output_tokens:100}\n");
    const auto r = simulate(trace, cluster(8, 1, true));
    EXPECT_EQ(r.metrics.scale_up_count, 1);
    const auto& m = r.metrics.requests[0];
    ASSERT_TRUE(m.completed_s.has_value());
    EXPECT_GE(m.placed_instance, 8);
    // Prefill at TP4 rate after the merge; the transformation itself is short.
    EXPECT_NEAR(*m.ttft_s, 51200.0 / 767.0, 0.5);
    EXPECT_GT(r.metrics.stall_total_s, 0.0);
    EXPECT_NE(r.event_log.find("scale_up_done"), std::string::npos);
}

TEST(Simulation, IdleTp4ScalesDown) {
    const auto trace = parse("{arrival_ms:5000, input_tokens:100, output_tokens:10}\n");
    const auto r = simulate(trace, cluster(4, 4, true));
    EXPECT_EQ(r.metrics.scale_down_count, 1);
    EXPECT_TRUE(r.metrics.requests[0].completed_s.has_value());
    // After the split the request runs on a TP1 fragment.
    EXPECT_NEAR(*r.metrics.requests[0].ttft_s, 100.0 / 448.0, 1e-9);
}

std::vector<Request> saturating_shorts(double duration) {
    SyntheticConfig c;
    c.short_rate = 600.0;
    c.long_rate = 0.0;
    c.duration_s = duration;
    c.seed = 3;
    return gen_synthetic(c);
}

TEST(Simulation, SaturatedThroughputMatchesPerfModel) {
    const auto trace = saturating_shorts(200.0);
    auto c = cluster(4, 1, false);
    c.horizon_s = 200.0;
    EXPECT_NEAR(simulate(trace, c).metrics.steady_state_throughput(50.0, 200.0), 1792.0, 1e-6);
    c.initial_tp = 4;
    EXPECT_NEAR(simulate(trace, c).metrics.steady_state_throughput(50.0, 200.0), 767.0, 1e-6);
}

TEST(Simulation, DeterministicAcrossRuns) {
    SyntheticConfig s;
    s.duration_s = 120.0;
    s.long_rate = 4.0;
    const auto trace = gen_synthetic(s);
    auto c = cluster(8, 1, true);
    c.horizon_s = 120.0;
    for (auto p : {sched::Policy::Gyges, sched::Policy::RoundRobin, sched::Policy::LeastLoad}) {
        const auto a = simulate(trace, c, p);
        const auto b = simulate(trace, c, p);
        EXPECT_EQ(a.event_log, b.event_log);
        EXPECT_EQ(format_metrics(a.metrics, MetricsFormat::Csv), format_metrics(b.metrics, MetricsFormat::Csv));
        EXPECT_FALSE(a.event_log.empty());
    }
}

// With no horizon every request finishes, so processed tokens equal the work of the trace.
TEST(Simulation, DrainedRunAccountsForEveryToken) {
    SyntheticConfig s;
    s.duration_s = 60.0;
    s.long_rate = 2.0;
    const auto trace = gen_synthetic(s);
    const auto r = simulate(trace, cluster(8, 1, true));
    double expected = 0.0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& m = r.metrics.requests[i];
        ASSERT_TRUE(m.completed_s.has_value() || m.rejected) << i;
        if (m.completed_s) {
            expected += trace[i].input_tokens + trace[i].output_tokens - 1;
        }
    }
    EXPECT_NEAR(r.metrics.tokens_processed, expected, 1e-6 * expected);
}

TEST(Metrics, CsvLayoutAndSummary) {
    MetricsRecord m;
    EXPECT_EQ(format_metrics(m, MetricsFormat::Csv),
              "request_id,arrival_s,placed_instance,ttft_s,tpot_s,completed_s,rejected\n");
    EXPECT_EQ(format_metrics(m, MetricsFormat::JsonLines), "");
    m.requests.push_back({0, 1.5, 2, 0.25, 0.01, 3.0, false});
    m.requests.push_back({1, 2.0, -1, std::nullopt, std::nullopt, std::nullopt, true});
    m.window_throughput = {100.0, 200.0};
    m.transformation_count = 3;
    m.peak_gpu_bytes = 123;
    const auto csv = format_metrics(m, MetricsFormat::Csv);
    EXPECT_NE(csv.find("0,1.500000,2,0.250000,0.010000,3.000000,0\n"), std::string::npos);
    EXPECT_NE(csv.find("1,2.000000,-1,,,,1\n"), std::string::npos);
    EXPECT_NE(csv.find("# throughput_tps_mean,150.000000\n"), std::string::npos);
    EXPECT_NE(csv.find("# transformation_count,3\n"), std::string::npos);
    EXPECT_NE(csv.find("# stall_total_s,0.000000\n"), std::string::npos);
    EXPECT_NE(csv.find("# peak_gpu_bytes,123\n"), std::string::npos);

    const auto jsonl = format_metrics(m, MetricsFormat::JsonLines);
    std::istringstream lines(jsonl);
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        if (n == 1) {
            EXPECT_TRUE(j["ttft_s"].is_null());
            EXPECT_TRUE(j["rejected"].get<bool>());
        }
        if (n == 2) {
            EXPECT_DOUBLE_EQ(j["summary"]["throughput_tps_mean"].get<double>(), 150.0);
        }
        ++n;
    }
    EXPECT_EQ(n, 3);
}

TEST(Metrics, WriteErrors) {
    MetricsRecord m;
    try {
        write_metrics(m, "/tmp/unused.csv", "xml");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UsageError);
    }
    try {
        write_metrics(m, "/nonexistent-dir/out.csv", "csv");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IoError);
    }
    const auto path = std::filesystem::temp_directory_path() / "tpshift_metrics_test.csv";
    write_metrics(m, path.string(), "csv");
    EXPECT_TRUE(std::filesystem::exists(path));
    std::filesystem::remove(path);
}

}  // namespace
}  // namespace tpshift::sim
