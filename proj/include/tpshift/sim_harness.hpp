// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "tpshift/error.hpp"
#include "tpshift/model_config.hpp"
#include "tpshift/scheduler.hpp"
#include "tpshift/transform_engine.hpp"
#include "tpshift/weight_plan.hpp"

namespace tpshift::sim {

using sched::Request;

// ---------------------------------------------------------------------------
// Workloads

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
        s.remove_prefix(1);
    }
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
        s.remove_suffix(1);
    }
    return s;
}

inline double parse_number(std::string_view v, std::size_t line, std::string_view key) {
    v = trim(v);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw ParseError(line, "value of '" + std::string(key) + "' is not a number: '" + std::string(v) + "'");
    }
    if (out < 0.0) {
        throw ParseError(line, "'" + std::string(key) + "' is negative");
    }
    return out;
}

}  // namespace detail

/**
 * One record per line, e.g. `{arrival_ms:0, input_tokens:1024, output_tokens:128}`.
 * Keys may be quoted. Blank lines and lines starting with '#' are skipped.
 * Requests come back sorted by arrival (stable), numbered in that order.
 */
inline std::vector<Request> parse_trace(std::istream& in) {
    std::vector<Request> out;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        auto s = detail::trim(raw);
        if (s.empty() || s.front() == '#') {
            continue;
        }
        if (s.front() != '{' || s.back() != '}') {
            throw ParseError(line, "expected a {...} record");
        }
        s = s.substr(1, s.size() - 2);
        std::map<std::string, double> fields;
        while (!detail::trim(s).empty()) {
            const auto comma = s.find(',');
            auto item = s.substr(0, comma);
            s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
            const auto colon = item.find(':');
            if (colon == std::string_view::npos) {
                throw ParseError(line, "expected key:value, got '" + std::string(detail::trim(item)) + "'");
            }
            auto key = detail::trim(item.substr(0, colon));
            if (key.size() >= 2 && key.front() == '"' && key.back() == '"') {
                key = key.substr(1, key.size() - 2);
            }
            if (key != "arrival_ms" && key != "input_tokens" && key != "output_tokens") {
                throw ParseError(line, "unknown field '" + std::string(key) + "'");
            }
            fields[std::string(key)] = detail::parse_number(item.substr(colon + 1), line, key);
        }
        for (const char* k : {"arrival_ms", "input_tokens", "output_tokens"}) {
            if (fields.count(k) == 0) {
                throw ParseError(line, std::string("missing field '") + k + "'");
            }
        }
        Request r;
        r.arrival_time = fields["arrival_ms"] / 1000.0;
        r.input_tokens = static_cast<int>(fields["input_tokens"]);
        r.output_tokens = static_cast<int>(fields["output_tokens"]);
        if (r.input_tokens < 1 || r.output_tokens < 1 || r.input_tokens != fields["input_tokens"] ||
            r.output_tokens != fields["output_tokens"]) {
            throw ParseError(line, "token counts must be positive integers");
        }
        out.push_back(r);
    }
    if (out.empty()) {
        throw Error(ErrorCode::EmptyTrace, "trace has no requests");
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Request& a, const Request& b) { return a.arrival_time < b.arrival_time; });
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].id = static_cast<int>(i);
    }
    return out;
}

inline std::vector<Request> load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open trace '" + path + "'");
    }
    return parse_trace(in);
}

struct SyntheticConfig {
    double short_rate = 60.0;  ///< queries per minute
    double long_rate = 1.0;    ///< queries per minute
    int short_len = 1024;
    int long_len = 50 * 1024;
    double duration_s = 600.0;
    std::uint64_t seed = 42;
    double output_share = 0.103;  ///< output length = input * share / (1 - share)
};

inline int output_for(int input, double share) {
    return std::max(1, static_cast<int>(std::lround(input * share / (1.0 - share))));
}

/// Two independent Poisson streams (short and long), merged by arrival time.
inline std::vector<Request> gen_synthetic(const SyntheticConfig& c) {
    if (c.short_rate < 0.0 || c.long_rate < 0.0 || c.duration_s < 0.0 || c.short_len < 1 || c.long_len < 1) {
        throw std::invalid_argument("synthetic workload parameters must be non-negative, lengths positive");
    }
    std::vector<std::pair<Request, int>> all;
    auto stream = [&](double per_minute, int len, std::uint64_t seed, int kind) {
        if (per_minute <= 0.0) {
            return;
        }
        std::mt19937_64 rng(seed);
        std::exponential_distribution<double> gap(per_minute / 60.0);
        for (double t = gap(rng); t < c.duration_s; t += gap(rng)) {
            all.push_back({Request{0, t, len, output_for(len, c.output_share)}, kind});
        }
    };
    stream(c.short_rate, c.short_len, c.seed, 0);
    stream(c.long_rate, c.long_len, c.seed ^ 0x9e3779b97f4a7c15ULL, 1);
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return std::tie(a.first.arrival_time, a.second) < std::tie(b.first.arrival_time, b.second);
    });
    std::vector<Request> out;
    for (auto& [r, kind] : all) {
        r.id = static_cast<int>(out.size());
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct RequestMetrics {
    int request_id = 0;
    double arrival_s = 0.0;
    int placed_instance = -1;
    std::optional<double> ttft_s;
    std::optional<double> tpot_s;
    std::optional<double> completed_s;
    bool rejected = false;
};

struct MetricsRecord {
    std::vector<RequestMetrics> requests;
    double window_s = 10.0;
    std::vector<double> window_throughput;  ///< tokens/second per window; windows tile the run
    int transformation_count = 0;
    int scale_up_count = 0;
    int scale_down_count = 0;
    double stall_total_s = 0.0;
    Bytes peak_gpu_bytes = 0;
    double tokens_processed = 0.0;

    double throughput_tps_mean() const {
        if (window_throughput.empty()) {
            return 0.0;
        }
        double s = 0.0;
        for (double v : window_throughput) {
            s += v;
        }
        return s / static_cast<double>(window_throughput.size());
    }

    /// Mean over the full windows that start at or after `warmup_s`.
    double steady_state_throughput(double warmup_s, double horizon_s) const {
        double s = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < window_throughput.size(); ++i) {
            const double start = static_cast<double>(i) * window_s;
            if (start >= warmup_s && start + window_s <= horizon_s + 1e-9) {
                s += window_throughput[i];
                ++n;
            }
        }
        return n ? s / n : 0.0;
    }
};

enum class MetricsFormat { Csv, JsonLines };

inline MetricsFormat parse_format(const std::string& s) {
    if (s == "csv") {
        return MetricsFormat::Csv;
    }
    if (s == "jsonl") {
        return MetricsFormat::JsonLines;
    }
    throw Error(ErrorCode::UsageError, "unsupported metrics format '" + s + "' (expected csv or jsonl)");
}

inline std::string fixed(double v) { return fmt::format("{:.6f}", v); }

/**
 * CSV: the per-request header and rows, then the summary as '#'-prefixed
 * key,value lines. A record without requests or windows is header-only.
 * JSON lines: one object per request, then one {"summary": {...}} line.
 */
inline std::string format_metrics(const MetricsRecord& m, MetricsFormat format) {
    std::string out;
    const bool has_summary = !m.requests.empty() || !m.window_throughput.empty();
    auto opt = [](const std::optional<double>& v, const char* missing) { return v ? fixed(*v) : std::string(missing); };
    if (format == MetricsFormat::Csv) {
        out += "request_id,arrival_s,placed_instance,ttft_s,tpot_s,completed_s,rejected\n";
        for (const auto& r : m.requests) {
            out += fmt::format("{},{},{},{},{},{},{}\n", r.request_id, fixed(r.arrival_s), r.placed_instance,
                               opt(r.ttft_s, ""), opt(r.tpot_s, ""), opt(r.completed_s, ""), r.rejected ? 1 : 0);
        }
        if (has_summary) {
            out += "# summary\n";
            out += fmt::format("# throughput_tps_mean,{}\n", fixed(m.throughput_tps_mean()));
            out += fmt::format("# transformation_count,{}\n", m.transformation_count);
            out += fmt::format("# stall_total_s,{}\n", fixed(m.stall_total_s));
            out += fmt::format("# peak_gpu_bytes,{}\n", m.peak_gpu_bytes);
            out += fmt::format("# scale_up_count,{}\n", m.scale_up_count);
            out += fmt::format("# scale_down_count,{}\n", m.scale_down_count);
        }
        return out;
    }
    for (const auto& r : m.requests) {
        out += fmt::format(
            "{{\"request_id\":{},\"arrival_s\":{},\"placed_instance\":{},\"ttft_s\":{},\"tpot_s\":{},"
            "\"completed_s\":{},\"rejected\":{}}}\n",
            r.request_id, fixed(r.arrival_s), r.placed_instance, opt(r.ttft_s, "null"), opt(r.tpot_s, "null"),
            opt(r.completed_s, "null"), r.rejected ? "true" : "false");
    }
    if (has_summary) {
        out += fmt::format(
            "{{\"summary\":{{\"throughput_tps_mean\":{},\"transformation_count\":{},\"stall_total_s\":{},"
            "\"peak_gpu_bytes\":{},\"scale_up_count\":{},\"scale_down_count\":{}}}}}\n",
            fixed(m.throughput_tps_mean()), m.transformation_count, fixed(m.stall_total_s), m.peak_gpu_bytes,
            m.scale_up_count, m.scale_down_count);
    }
    return out;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw Error(ErrorCode::IoError, "cannot write '" + path + "'");
    }
    f << text;
    if (!f) {
        throw Error(ErrorCode::IoError, "failed writing '" + path + "'");
    }
}

inline void write_metrics(const MetricsRecord& m, const std::string& path, const std::string& format) {
    const auto f = parse_format(format);
    write_text(path, format_metrics(m, f));
}

// ---------------------------------------------------------------------------
// Simulation

struct ClusterConfig {
    int hosts = 1;
    int gpus_per_host = 8;
    int initial_tp = 1;
    bool transformations_enabled = true;
    double scale_down_period_s = 1.0;
    double window_s = 10.0;
    std::optional<double> horizon_s;  ///< stop here; unset runs until all work drains
    ModelConfig model = *find_builtin_model("qwen2.5-32b");
    int stagger_width = 1;
    int stage_count = 0;  ///< KV migration stages; 0 picks the default
    int tokens_per_block = 16;
    bool padded = true;
};

struct RunResult {
    MetricsRecord metrics;
    std::string event_log;  ///< JSON lines
};

namespace detail {

constexpr double kEps = 1e-9;

struct SimRequest {
    Request req;
    bool long_request = false;
    long long kv_reserved = 0;
    double prefill_left = 0.0;
    double decode_left = 0.0;   ///< output tokens still to emit after the first
    double decode_budget = 0.0; ///< of which covered by the current KV reservation
    long long admit_seq = 0;
    int instance = -1;
    enum class Phase { Pending, Waiting, Prefill, Decode, Done } phase = Phase::Pending;
};

struct SimInstance {
    sched::InstanceState state;
    std::deque<int> waiting;
    std::vector<int> prefill;  ///< admitted, FCFS by admit_seq
    std::vector<int> decoding;
    double paused_until = 0.0;
    double last_update = 0.0;
    long long version = 0;
    bool alive = true;
};

struct Transformation {
    std::vector<int> members;
    int host = 0;
    int first_gpu = 0;
    int target_tp = 1;
    bool scale_up = true;
    std::vector<std::vector<int>> fragments;
    std::vector<int> attached;  ///< requests that go to the merged instance
};

enum class EventKind { Arrival, InstanceWake, TransformDone, Periodic };

struct Event {
    double t;
    long long seq;
    EventKind kind;
    int a;
    long long b;
    bool operator>(const Event& o) const { return std::tie(t, seq) > std::tie(o.t, o.seq); }
};

class Simulator {
public:
    Simulator(const std::vector<Request>& trace, const ClusterConfig& cluster, const sched::PerfModel& perf,
              const sched::SchedulerConfig& sc, const transform::CostModel& cost)
        : cluster_(cluster), perf_(perf), sched_(sc, perf), cost_(cost) {
        cost_.validate();
        if (cluster.hosts < 1 || cluster.gpus_per_host < 1 || !(cluster.window_s > 0.0) ||
            !(cluster.scale_down_period_s > 0.0) || !perf.supports(cluster.initial_tp) ||
            cluster.gpus_per_host % cluster.initial_tp != 0) {
            throw Error(ErrorCode::UsageError, "invalid cluster configuration");
        }
        for (const auto& r : trace) {
            SimRequest s;
            s.req = r;
            s.long_request = sched_.is_long(r);
            requests_.push_back(s);
            metrics_.requests.push_back({r.id, r.arrival_time, -1, {}, {}, {}, false});
        }
        metrics_.window_s = cluster.window_s;
        for (int h = 0; h < cluster.hosts; ++h) {
            for (int g = 0; g < cluster.gpus_per_host; g += cluster.initial_tp) {
                std::vector<int> gpus;
                for (int k = 0; k < cluster.initial_tp; ++k) {
                    gpus.push_back(g + k);
                }
                make_instance(h, cluster.initial_tp, gpus);
            }
        }
        non_mlp_bytes_ = weights::non_mlp_bytes(cluster.model);
        mlp_bytes_ = weights::mlp_bytes_per_layer(cluster.model) * static_cast<Bytes>(cluster.model.num_layers);
    }

    RunResult run() {
        for (std::size_t i = 0; i < requests_.size(); ++i) {
            push(requests_[i].req.arrival_time, EventKind::Arrival, static_cast<int>(i), 0);
        }
        if (cluster_.transformations_enabled) {
            push(cluster_.scale_down_period_s, EventKind::Periodic, 0, 0);
        }
        const double horizon = cluster_.horizon_s.value_or(std::numeric_limits<double>::infinity());
        double end = 0.0;
        while (!queue_.empty()) {
            const Event e = queue_.top();
            if (e.t > horizon) {
                break;
            }
            queue_.pop();
            now_ = e.t;
            end = std::max(end, now_);
            switch (e.kind) {
            case EventKind::Arrival: on_arrival(e.a); break;
            case EventKind::InstanceWake: on_wake(e.a, e.b); break;
            case EventKind::TransformDone: on_transform_done(e.a); break;
            case EventKind::Periodic: on_periodic(); break;
            }
            if (e.kind == EventKind::Periodic && !work_left()) {
                break;
            }
        }
        if (std::isfinite(horizon)) {
            end = horizon;
            now_ = horizon;
        }
        for (auto& inst : instances_) {
            if (inst.alive) {
                advance(inst, end);
            }
        }
        finish_windows(end);
        for (std::size_t i = 0; i < requests_.size(); ++i) {
            metrics_.requests[i].placed_instance = requests_[i].instance;
        }
        return {metrics_, log_};
    }

private:
    // --- bookkeeping --------------------------------------------------------

    void push(double t, EventKind k, int a, long long b) { queue_.push(Event{t, seq_++, k, a, b}); }

    void log(const std::string& body) { log_ += fmt::format("{{\"t\":{},{}}}\n", fixed(now_), body); }

    static std::string list(const std::vector<int>& v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            s += (i ? "," : "") + std::to_string(v[i]);
        }
        return s + "]";
    }

    int make_instance(int host, int tp, std::vector<int> gpus) {
        SimInstance inst;
        inst.state.id = next_instance_id_++;
        inst.state.host = host;
        inst.state.tp = tp;
        inst.state.gpu_ids = std::move(gpus);
        inst.state.kv_capacity_tokens = perf_.kv_capacity(tp);
        inst.state.throughput_capacity = perf_.throughput(tp);
        inst.last_update = now_;
        instances_.push_back(std::move(inst));
        return instances_.back().state.id;
    }

    SimInstance& inst_by_id(int id) { return instances_.at(static_cast<std::size_t>(id)); }

    bool work_left() const {
        if (!deferred_.empty() || !transforms_.empty()) {
            return true;
        }
        for (const auto& r : requests_) {
            if (r.phase != SimRequest::Phase::Done && r.phase != SimRequest::Phase::Pending) {
                return true;
            }
        }
        for (const auto& r : requests_) {
            if (r.phase == SimRequest::Phase::Pending && r.req.arrival_time >= now_ && !metrics_.requests[r.req.id].rejected) {
                return true;
            }
        }
        return false;
    }

    void add_tokens(double t0, double t1, double rate) {
        if (t1 <= t0 || rate <= 0.0) {
            return;
        }
        metrics_.tokens_processed += rate * (t1 - t0);
        const double w = cluster_.window_s;
        auto i = static_cast<std::size_t>(std::floor(t0 / w));
        double t = t0;
        while (t < t1 - kEps * 1e-3) {
            const double window_end = (static_cast<double>(i) + 1.0) * w;
            const double seg_end = std::min(t1, window_end);
            if (window_tokens_.size() <= i) {
                window_tokens_.resize(i + 1, 0.0);
            }
            window_tokens_[i] += rate * (seg_end - t);
            t = seg_end;
            ++i;
        }
    }

    void finish_windows(double end) {
        const double w = cluster_.window_s;
        const auto n = static_cast<std::size_t>(std::ceil(end / w - 1e-9));
        window_tokens_.resize(std::max(n, window_tokens_.size()), 0.0);
        window_tokens_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double len = std::min(w, end - static_cast<double>(i) * w);
            metrics_.window_throughput.push_back(len > 0.0 ? window_tokens_[i] / len : 0.0);
        }
    }

    void note_memory(const SimInstance& inst) {
        const int tp = inst.state.tp;
        const Bytes kv = static_cast<Bytes>(inst.state.kv_used_tokens) * cluster_.model.kv_bytes_per_token() /
                         static_cast<Bytes>(tp);
        metrics_.peak_gpu_bytes = std::max(metrics_.peak_gpu_bytes, non_mlp_bytes_ + mlp_bytes_ / tp + kv);
    }

    // --- fluid progress -----------------------------------------------------

    /// Moves `inst` forward to time `t`; no completion can fall strictly inside (t0, t).
    void advance(SimInstance& inst, double t) {
        const double t0 = std::max(inst.last_update, inst.paused_until);
        inst.last_update = std::max(inst.last_update, t);
        if (t <= t0) {
            return;
        }
        const double dt = t - t0;
        if (!inst.prefill.empty()) {
            auto& r = requests_[inst.prefill.front()];
            const double rate = perf_.prefill_rate(inst.state.tp);
            const double done = std::min(r.prefill_left, rate * dt);
            r.prefill_left -= done;
            add_tokens(t0, t0 + done / rate, rate);
        } else if (!inst.decoding.empty()) {
            const double rate = perf_.throughput(inst.state.tp);
            const double each = rate / static_cast<double>(inst.decoding.size()) * dt;
            double total = 0.0;
            for (int id : inst.decoding) {
                auto& r = requests_[id];
                const double d = std::min(each, r.decode_budget);
                r.decode_budget -= d;
                r.decode_left -= d;
                total += d;
            }
            add_tokens(t0, t0 + total / rate, rate);
        }
        sync_state(inst);
    }

    void sync_state(SimInstance& inst) {
        auto& st = inst.state;
        st.active_requests.clear();
        st.waiting_requests.clear();
        auto entry = [&](int id) {
            const auto& r = requests_[id];
            const double remaining = std::max(0.0, r.prefill_left) + std::max(0.0, r.decode_left);
            return sched::ActiveRequest{r.req.id, r.kv_reserved, static_cast<long long>(std::ceil(remaining - kEps)),
                                        r.long_request};
        };
        for (int id : inst.prefill) {
            st.active_requests.push_back(entry(id));
        }
        for (int id : inst.decoding) {
            st.active_requests.push_back(entry(id));
        }
        std::sort(st.active_requests.begin(), st.active_requests.end(),
                  [](const auto& a, const auto& b) { return a.id < b.id; });
        for (int id : inst.waiting) {
            auto e = entry(id);
            e.kv_tokens = sched_.kv_need(requests_[id].req);
            st.waiting_requests.push_back(e);
        }
    }

    void reschedule(SimInstance& inst) {
        ++inst.version;
        if (!inst.alive) {
            return;
        }
        double next = std::numeric_limits<double>::infinity();
        const double start = std::max(now_, inst.paused_until);
        if (!inst.prefill.empty()) {
            next = start + requests_[inst.prefill.front()].prefill_left / perf_.prefill_rate(inst.state.tp);
        } else if (!inst.decoding.empty()) {
            const double each = perf_.throughput(inst.state.tp) / static_cast<double>(inst.decoding.size());
            double least = std::numeric_limits<double>::infinity();
            for (int id : inst.decoding) {
                least = std::min(least, requests_[id].decode_budget);
            }
            next = start + least / each;
        }
        if (std::isfinite(next)) {
            push(next, EventKind::InstanceWake, inst.state.id, inst.version);
        }
    }

    /// Admits waiting requests in FIFO order while their KV fits.
    void admit(SimInstance& inst) {
        if (inst.state.transforming) {
            return;
        }
        while (!inst.waiting.empty()) {
            auto& r = requests_[inst.waiting.front()];
            const long long need = sched_.kv_need(r.req);
            if (inst.state.kv_used_tokens + need > inst.state.kv_capacity_tokens) {
                break;
            }
            inst.waiting.pop_front();
            r.kv_reserved = need;
            inst.state.kv_used_tokens += need;
            r.admit_seq = admit_seq_++;
            r.phase = SimRequest::Phase::Prefill;
            r.prefill_left = r.req.input_tokens;
            r.decode_left = r.req.output_tokens - 1;
            r.decode_budget = std::min<double>(r.decode_left, static_cast<double>(need - r.req.input_tokens - 1));
            r.decode_budget = std::max(0.0, r.decode_budget);
            inst.prefill.push_back(r.req.id);
            log(fmt::format("\"event\":\"admit\",\"request\":{},\"instance\":{}", r.req.id, inst.state.id));
        }
        note_memory(inst);
        sync_state(inst);
    }

    void complete(SimInstance& inst, SimRequest& r, bool truncated) {
        r.phase = SimRequest::Phase::Done;
        inst.state.kv_used_tokens -= r.kv_reserved;
        auto& m = metrics_.requests[r.req.id];
        m.completed_s = now_;
        const int emitted = r.req.output_tokens - static_cast<int>(std::lround(std::max(0.0, r.decode_left)));
        m.tpot_s = emitted > 1 ? (now_ - (r.req.arrival_time + *m.ttft_s)) / (emitted - 1) : 0.0;
        log(fmt::format("\"event\":\"{}\",\"request\":{},\"instance\":{}", truncated ? "truncate" : "complete",
                        r.req.id, inst.state.id));
    }

    /// Finishes whatever reached its boundary at `now_`.
    void settle(SimInstance& inst) {
        while (!inst.prefill.empty() && requests_[inst.prefill.front()].prefill_left <= kEps) {
            auto& r = requests_[inst.prefill.front()];
            inst.prefill.erase(inst.prefill.begin());
            r.prefill_left = 0.0;
            metrics_.requests[r.req.id].ttft_s = now_ - r.req.arrival_time;
            log(fmt::format("\"event\":\"first_token\",\"request\":{},\"instance\":{}", r.req.id, inst.state.id));
            if (r.decode_left <= kEps) {
                complete(inst, r, false);
            } else {
                r.phase = SimRequest::Phase::Decode;
                inst.decoding.push_back(r.req.id);
            }
        }
        std::vector<int> keep;
        for (int id : inst.decoding) {
            auto& r = requests_[id];
            if (r.decode_left <= kEps) {
                r.decode_left = 0.0;
                complete(inst, r, false);
            } else if (r.decode_budget <= kEps) {
                // Output outgrew the reservation: extend it or stop the request here.
                const long long extra = static_cast<long long>(std::ceil(r.decode_left - kEps));
                if (inst.state.kv_used_tokens + extra <= inst.state.kv_capacity_tokens) {
                    inst.state.kv_used_tokens += extra;
                    r.kv_reserved += extra;
                    r.decode_budget = r.decode_left;
                    keep.push_back(id);
                } else {
                    complete(inst, r, true);
                }
            } else {
                keep.push_back(id);
            }
        }
        inst.decoding = std::move(keep);
    }

    // --- events -------------------------------------------------------------

    sched::ClusterView view() {
        sched::ClusterView v;
        v.hosts = cluster_.hosts;
        v.gpus_per_host = cluster_.gpus_per_host;
        v.now = now_;
        for (auto& inst : instances_) {
            if (inst.alive) {
                advance(inst, now_);
                inst.state.reserved_for_transform = reserved_.count(inst.state.id) != 0;
                v.instances.push_back(inst.state);
            }
        }
        for (int id : deferred_) {
            v.deferred_long_requests += requests_[id].long_request ? 1 : 0;
        }
        return v;
    }

    void refresh_reserve() {
        const auto ids = sched_.update_reserve(view());
        const std::set<int> next(ids.begin(), ids.end());
        if (next != reserved_) {
            reserved_ = next;
            log(fmt::format("\"event\":\"reserve\",\"instances\":{}", list(ids)));
        }
    }

    void on_arrival(int idx) {
        auto& r = requests_[idx];
        log(fmt::format("\"event\":\"arrival\",\"request\":{},\"input\":{},\"long\":{}", r.req.id, r.req.input_tokens,
                        r.long_request ? "true" : "false"));
        sched_.note_arrival(r.req, now_);
        if (cluster_.transformations_enabled) {
            refresh_reserve();
        }
        route(idx);
    }

    void route(int idx) {
        auto& r = requests_[idx];
        sched::Decision d;
        try {
            d = sched_.schedule_request(r.req, view());
            if (d.kind == sched::DecisionKind::ScaleUp && !cluster_.transformations_enabled) {
                throw Error(ErrorCode::Unschedulable, "transformations are disabled");
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::Unschedulable) {
                throw;
            }
            r.phase = SimRequest::Phase::Done;
            metrics_.requests[r.req.id].rejected = true;
            log(fmt::format("\"event\":\"reject\",\"request\":{}", r.req.id));
            return;
        }
        log(fmt::format("\"event\":\"{}\",\"request\":{},\"instance\":{}", to_string(d.kind), r.req.id, d.instance));
        switch (d.kind) {
        case sched::DecisionKind::Place:
        case sched::DecisionKind::Queue: enqueue(idx, d.instance); break;
        case sched::DecisionKind::ScaleUp: start_scale_up(d.group, idx); break;
        case sched::DecisionKind::Defer:
            r.phase = SimRequest::Phase::Waiting;
            deferred_.push_back(idx);
            break;
        }
    }

    void enqueue(int idx, int instance) {
        auto& inst = inst_by_id(instance);
        auto& r = requests_[idx];
        r.phase = SimRequest::Phase::Waiting;
        r.instance = instance;
        advance(inst, now_);
        inst.waiting.push_back(idx);
        const bool idle = inst.prefill.empty() && inst.decoding.empty();
        admit(inst);
        if (idle || !inst.prefill.empty()) {
            reschedule(inst);
        }
    }

    void on_wake(int id, long long version) {
        auto& inst = inst_by_id(id);
        if (!inst.alive || inst.version != version) {
            return;
        }
        advance(inst, now_);
        settle(inst);
        admit(inst);
        reschedule(inst);
    }

    void pause(SimInstance& inst, double stall) {
        advance(inst, now_);
        inst.paused_until = std::max(inst.paused_until, now_) + stall;
        inst.last_update = now_;
        reschedule(inst);
    }

    void start_scale_up(const sched::ScaleUpGroup& g, int attached) {
        Transformation t;
        t.members = g.instances;
        t.host = g.host;
        t.first_gpu = g.first_gpu;
        t.target_tp = g.target_tp;
        t.scale_up = true;
        t.attached.push_back(attached);
        requests_[attached].phase = SimRequest::Phase::Waiting;
        std::vector<std::vector<int>> tokens;
        int from = 0;
        for (int id : g.instances) {
            auto& inst = inst_by_id(id);
            advance(inst, now_);
            from = std::max(from, inst.state.tp);
            std::vector<int> held;
            for (const auto& a : inst.state.active_requests) {
                held.push_back(static_cast<int>(a.kv_tokens));
            }
            tokens.push_back(held);
        }
        begin(t, from, tokens);
        ++metrics_.scale_up_count;
    }

    void begin(Transformation t, int from, const std::vector<std::vector<int>>& tokens) {
        const auto est = transform::estimate_transformation(cluster_.model, from, t.target_tp, tokens, cost_,
                                                            cluster_.stage_count, cluster_.padded,
                                                            cluster_.tokens_per_block);
        const double duration = std::max(est.total_raw_seconds, est.total_stall);
        for (int id : t.members) {
            auto& inst = inst_by_id(id);
            inst.state.transforming = true;
            inst.state.transform_target_tp = t.target_tp;
            pause(inst, est.total_stall);
        }
        ++metrics_.transformation_count;
        metrics_.stall_total_s += est.total_stall;
        log(fmt::format("\"event\":\"{}\",\"instances\":{},\"from_tp\":{},\"to_tp\":{},\"stall_s\":{},\"duration_s\":{}",
                        t.scale_up ? "scale_up_start" : "scale_down_start", list(t.members), from, t.target_tp,
                        fixed(est.total_stall), fixed(duration)));
        const int key = next_transform_id_++;
        transforms_.emplace(key, std::move(t));
        push(now_ + duration, EventKind::TransformDone, key, 0);
    }

    void on_transform_done(int key) {
        Transformation t = std::move(transforms_.at(key));
        transforms_.erase(key);
        std::vector<int> prefill;
        std::vector<int> decoding;
        std::vector<int> waiting;
        long long kv = 0;
        for (int id : t.members) {
            auto& inst = inst_by_id(id);
            advance(inst, now_);
            settle(inst);
            prefill.insert(prefill.end(), inst.prefill.begin(), inst.prefill.end());
            decoding.insert(decoding.end(), inst.decoding.begin(), inst.decoding.end());
            waiting.insert(waiting.end(), inst.waiting.begin(), inst.waiting.end());
            kv += inst.state.kv_used_tokens;
            inst.alive = false;
            ++inst.version;
        }
        auto by_admission = [&](int a, int b) { return requests_[a].admit_seq < requests_[b].admit_seq; };
        std::sort(prefill.begin(), prefill.end(), by_admission);
        std::sort(decoding.begin(), decoding.end(), by_admission);
        std::vector<int> created;
        if (t.scale_up) {
            std::vector<int> gpus;
            for (int k = 0; k < t.target_tp; ++k) {
                gpus.push_back(t.first_gpu + k);
            }
            const int id = make_instance(t.host, t.target_tp, gpus);
            auto& inst = inst_by_id(id);
            inst.prefill = prefill;
            inst.decoding = decoding;
            inst.waiting.assign(waiting.begin(), waiting.end());
            inst.state.kv_used_tokens = kv;
            for (int r : t.attached) {
                inst.waiting.push_back(r);
            }
            created.push_back(id);
        } else {
            const auto& src = inst_by_id(t.members.front()).state;
            const int parts = static_cast<int>(t.fragments.size());
            const int width = src.tp / parts;
            for (int f = 0; f < parts; ++f) {
                std::vector<int> gpus;
                for (int k = 0; k < width; ++k) {
                    gpus.push_back(src.first_gpu() + f * width + k);
                }
                created.push_back(make_instance(src.host, width, gpus));
            }
            std::map<int, int> owner;
            for (int f = 0; f < parts; ++f) {
                for (int rid : t.fragments[f]) {
                    owner[rid] = f;
                }
            }
            // Requests admitted after the split was planned go to the lightest fragment.
            auto place = [&](int rid) {
                int f = 0;
                if (auto it = owner.find(rid); it != owner.end()) {
                    f = it->second;
                } else {
                    for (int k = 1; k < parts; ++k) {
                        if (inst_by_id(created[k]).state.kv_used_tokens < inst_by_id(created[f]).state.kv_used_tokens) {
                            f = k;
                        }
                    }
                }
                return f;
            };
            for (int rid : prefill) {
                auto& inst = inst_by_id(created[place(rid)]);
                inst.prefill.push_back(rid);
                inst.state.kv_used_tokens += requests_[rid].kv_reserved;
            }
            for (int rid : decoding) {
                auto& inst = inst_by_id(created[place(rid)]);
                inst.decoding.push_back(rid);
                inst.state.kv_used_tokens += requests_[rid].kv_reserved;
            }
            for (int rid : waiting) {
                inst_by_id(created[0]).waiting.push_back(rid);
            }
        }
        for (int id : created) {
            auto& inst = inst_by_id(id);
            for (int rid : inst.prefill) {
                requests_[rid].instance = id;
            }
            for (int rid : inst.decoding) {
                requests_[rid].instance = id;
            }
            for (int rid : inst.waiting) {
                requests_[rid].instance = id;
            }
            inst.last_update = now_;
            admit(inst);
            reschedule(inst);
        }
        log(fmt::format("\"event\":\"{}\",\"instances\":{}", t.scale_up ? "scale_up_done" : "scale_down_done",
                        list(created)));
        auto retry = std::move(deferred_);
        deferred_.clear();
        for (int idx : retry) {
            route(idx);
        }
    }

    void on_periodic() {
        refresh_reserve();
        auto v = view();
        for (const auto& st : v.instances) {
            if (auto d = sched_.schedule_parallelism(st, v)) {
                Transformation t;
                t.members = {st.id};
                t.host = st.host;
                t.first_gpu = st.first_gpu();
                t.target_tp = d->target_tp;
                t.scale_up = false;
                t.fragments = d->fragments;
                std::vector<std::vector<int>> tokens(1);
                for (const auto& a : st.active_requests) {
                    tokens[0].push_back(static_cast<int>(a.kv_tokens));
                }
                begin(t, st.tp, tokens);
                ++metrics_.scale_down_count;
                v = view();
            }
        }
        push(now_ + cluster_.scale_down_period_s, EventKind::Periodic, 0, 0);
    }

    ClusterConfig cluster_;
    sched::PerfModel perf_;
    sched::Scheduler sched_;
    transform::CostModel cost_;
    std::vector<SimRequest> requests_;
    std::vector<SimInstance> instances_;
    std::map<int, Transformation> transforms_;
    std::vector<int> deferred_;
    std::set<int> reserved_;
    std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
    std::vector<double> window_tokens_;
    MetricsRecord metrics_;
    std::string log_;
    double now_ = 0.0;
    long long seq_ = 0;
    long long admit_seq_ = 0;
    int next_instance_id_ = 0;
    int next_transform_id_ = 0;
    Bytes non_mlp_bytes_ = 0;
    Bytes mlp_bytes_ = 0;
};

}  // namespace detail

/// Runs `trace` to completion (or to `cluster.horizon_s`) and returns metrics plus the event log.
inline RunResult run(const std::vector<Request>& trace, const ClusterConfig& cluster, const sched::PerfModel& perf,
                     const sched::SchedulerConfig& sched_config, const transform::CostModel& cost) {
    detail::Simulator sim(trace, cluster, perf, sched_config, cost);
    return sim.run();
}

}  // namespace tpshift::sim
