// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "tpshift/ffn_check.hpp"
#include "tpshift/kv_layout.hpp"
#include "tpshift/sim_harness.hpp"
#include "tpshift/transform_engine.hpp"
#include "tpshift/weight_plan.hpp"

using namespace tpshift;

namespace {

struct RunOptions {
    std::string trace;
    bool synthetic = false;
    sim::SyntheticConfig workload;
    std::optional<double> duration;
    std::string policy = "gyges";
    int hosts = 1;
    int gpus_per_host = 8;
    int initial_tp = 1;
    bool no_transform = false;
    std::string model = "qwen2.5-32b";
    double threshold = 0.5;
    double overlap = transform::CostModel{}.overlap_fraction;
    int stagger = 1;
    std::string out;
    std::string format = "csv";
    std::string event_log;
};

int run_sim(const RunOptions& o) {
    std::vector<sched::Request> trace;
    sim::ClusterConfig cluster;
    if (o.synthetic) {
        auto w = o.workload;
        w.duration_s = o.duration.value_or(w.duration_s);
        trace = sim::gen_synthetic(w);
        cluster.horizon_s = w.duration_s;
    } else {
        trace = sim::load_trace(o.trace);
        cluster.horizon_s = o.duration;
    }
    cluster.hosts = o.hosts;
    cluster.gpus_per_host = o.gpus_per_host;
    cluster.initial_tp = o.initial_tp;
    cluster.transformations_enabled = !o.no_transform;
    cluster.model = resolve_model(o.model);
    cluster.stagger_width = o.stagger;
    sched::SchedulerConfig sc;
    sc.policy = sched::parse_policy(o.policy);
    sc.scale_down_threshold = o.threshold;
    transform::CostModel cost;
    cost.overlap_fraction = o.overlap;
    const auto format = sim::parse_format(o.format);

    const auto result = sim::run(trace, cluster, sched::PerfModel{}, sc, cost);
    const auto text = sim::format_metrics(result.metrics, format);
    if (o.out.empty()) {
        std::cout << text;
    } else {
        sim::write_text(o.out, text);
        const auto& m = result.metrics;
        fmt::print("requests {} policy {} throughput_tps_mean {:.3f} transformations {} (up {}, down {}) stall_total_s "
                   "{:.6f} peak_gpu_bytes {}\n",
                   m.requests.size(), o.policy, m.throughput_tps_mean(), m.transformation_count, m.scale_up_count,
                   m.scale_down_count, m.stall_total_s, m.peak_gpu_bytes);
    }
    if (!o.event_log.empty()) {
        sim::write_text(o.event_log, result.event_log);
    }
    return 0;
}

struct PlanKvOptions {
    std::string model = "qwen2.5-32b";
    int tp_from = 1;
    int tp_to = 4;
    int requests = 2;
    int tokens = 512;
    int stages = 0;
    int tokens_per_block = 16;
    std::string layout = "header-centric";
};

kv::KvLayout layout_named(const std::string& name, const ModelConfig& m, int tpb) {
    if (name == "raw") {
        return kv::KvLayout::raw(tpb, m.num_kv_heads, m.head_dim, m.element_bytes);
    }
    if (name == "page-friendly") {
        return kv::KvLayout::page_friendly(tpb, m.num_kv_heads, m.head_dim, m.element_bytes);
    }
    if (name == "header-centric") {
        return kv::KvLayout::header_centric(tpb, m.num_kv_heads, m.head_dim, m.element_bytes);
    }
    throw Error(ErrorCode::UsageError, "unknown layout '" + name + "'");
}

// One layer of KV, `requests` equal requests per source instance.
int plan_kv(const PlanKvOptions& o) {
    const auto model = resolve_model(o.model);
    const auto layout = layout_named(o.layout, model, o.tokens_per_block);
    const int workers = std::max(o.tp_from, o.tp_to);
    if (o.tp_from < 1 || o.tp_to < 1 || workers % o.tp_from != 0 || workers % o.tp_to != 0) {
        throw Error(ErrorCode::IncompatibleGroup, fmt::format("tp {} -> {} is not a merge or split", o.tp_from, o.tp_to));
    }
    std::vector<kv::KvStore> stores;
    std::vector<PageSpace> spaces;
    int id = 0;
    for (int w = 0; w < workers; ++w) {
        stores.emplace_back(layout, w);
        spaces.emplace_back(model.gpu_memory_bytes());
    }
    for (int inst = 0; inst < workers / o.tp_from; ++inst) {
        for (int r = 0; r < o.requests; ++r, ++id) {
            for (int i = 0; i < o.tp_from; ++i) {
                const int w = inst * o.tp_from + i;
                kv::fill_request(stores[w], spaces[w], id, o.tokens,
                                 kv::retained_headers(i + 1, layout.num_headers, o.tp_from));
            }
        }
    }
    const int stages = o.stages > 0 ? o.stages : kv::default_stage_count(workers);
    const auto plan = o.layout == "header-centric" ? kv::plan_migration_inplace(stores, spaces, o.tp_from, o.tp_to, stages)
                                                   : kv::plan_migration_trim(stores, spaces, o.tp_from, o.tp_to);
    std::cout << "layout " << layout.describe() << '\n' << kv::to_text(plan);
    return 0;
}

struct PlanWeightsOptions {
    std::string model = "qwen2.5-32b";
    int tp_from = 1;
    int tp_to = 4;
    bool no_padding = false;
};

int plan_weights(const PlanWeightsOptions& o) {
    const auto model = resolve_model(o.model);
    const bool padded = !o.no_padding;
    if (padded) {
        for (const auto& t : weights::mlp_tensors(model)) {
            std::cout << weights::to_text(weights::make_padding_plan(t, model.supported_tp));
        }
        const auto summary = weights::model_padding_overhead(model, model.supported_tp);
        fmt::print("model_padding pad_bytes_per_layer {} total_pad_bytes {} overhead {:.6f}\n",
                   summary.pad_bytes_per_layer, summary.total_pad_bytes, summary.overhead_fraction);
    }
    const auto plans = o.tp_to > o.tp_from ? weights::plan_weight_scale_up(model, o.tp_from, o.tp_to, padded)
                                           : weights::plan_weight_scale_down(model, o.tp_from, o.tp_to, padded);
    if (plans.empty()) {
        std::cout << "no weight movement\n";
        return 0;
    }
    const auto& p = plans.front();
    fmt::print("weight_plan tp {}->{} kind {} layers {} per_layer copied_bytes {} freed_pages {} extra_peak_bytes {}\n",
               o.tp_from, o.tp_to, weights::to_string(p.kind), plans.size(), p.copied_bytes, p.freed_pages,
               p.extra_peak_bytes);
    for (const auto& m : p.moves) {
        fmt::print("  {} w{} copied {} alloc_pages {} freed_pages {} kept {}+{}\n", m.tensor, m.worker, m.copied_bytes,
                   m.alloc_pages, m.freed_pages, m.kept_offset, m.kept_length);
    }
    if (o.tp_to > o.tp_from) {
        const auto naive = weights::plan_weight_scale_up_naive(model, o.tp_from, o.tp_to);
        fmt::print("whole_copy_baseline extra_peak_gb {:.2f}\n", static_cast<double>(naive.extra_peak_bytes) / 1e9);
    }
    return 0;
}

struct CheckFfnOptions {
    int trials = 1000;
    std::uint64_t seed = 1;
    double tolerance = 1e-12;
};

int check_ffn(const CheckFfnOptions& o) {
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> entry(-1.0, 1.0);
    auto random = [&](std::size_t r, std::size_t c) {
        ffn::DenseMatrix m(r, c);
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                m(i, j) = entry(rng);
            }
        }
        return m;
    };
    const std::vector<ffn::ActivationKind> kinds{ffn::ActivationKind::Identity, ffn::ActivationKind::Relu,
                                                 ffn::ActivationKind::Silu, ffn::ActivationKind::GeluTanh,
                                                 ffn::ActivationKind::ShiftedIdentity};
    double worst_pad = 0.0;
    double worst_shard = 0.0;
    for (int t = 0; t < o.trials; ++t) {
        const int tp = 1 << (rng() % 3);
        const std::size_t rows = 1 + rng() % 4;
        const std::size_t hidden = 1 + rng() % 12;
        const std::size_t inter = static_cast<std::size_t>(tp) * (1 + rng() % 6);
        const std::size_t pad = rng() % 5;
        const ffn::Activation f{kinds[rng() % kinds.size()]};
        const auto x = random(rows, hidden);
        const auto up = random(hidden, inter);
        const auto down = random(inter, hidden);
        const auto reference = ffn::ffn(x, up, down, f);
        const auto padded = ffn::pad_weights(up, down, tp, pad);
        worst_pad = std::max(worst_pad, ffn::max_abs_diff(ffn::ffn_padded(x, padded.up, padded.down, f), reference));
        worst_shard = std::max(worst_shard,
                               ffn::max_abs_diff(ffn::shard_ffn(x, padded.up, padded.down, tp, f).reduced, reference));
    }
    const bool ok = worst_pad <= o.tolerance && worst_shard <= o.tolerance;
    fmt::print("trials {} max_abs_padded {:.3e} max_abs_sharded {:.3e} tolerance {:.1e} {}\n", o.trials, worst_pad,
               worst_shard, o.tolerance, ok ? "ok" : "FAILED");
    return ok ? 0 : 1;
}

int tables(const std::string& model_name) {
    const auto model = resolve_model(model_name);
    const sched::PerfModel perf;
    fmt::print("model {} layers {} weights_gb {:.2f} kv_bytes_per_token {}\n", model.name, model.num_layers,
               model.weights_gb, model.kv_bytes_per_token());
    fmt::print("\nparallelism tp instance_tps total_tps_per_8_gpus max_sequence_tokens weight_share\n");
    for (const auto& [tp, cap] : perf.kv_capacity_by_tp) {
        PageSpace space(model.gpu_memory_bytes());
        space.alloc(model.weights_bytes() / static_cast<Bytes>(tp), "weights", PageUse::Weights);
        const double share =
            static_cast<double>(space.memory_report().mapped_weights) / static_cast<double>(space.capacity_bytes());
        fmt::print("parallelism {} {:.0f} {:.0f} {} {:.1f}%\n", tp, perf.throughput(tp), perf.throughput(tp) * 8 / tp,
                   cap, 100.0 * share);
    }
    fmt::print("\npages_per_tensor tensor tp pages aligned\n");
    for (const auto& t : weights::mlp_tensors(model)) {
        for (int tp : model.supported_tp) {
            fmt::print("pages_per_tensor {} {} {} {}\n", t.name, tp, weights::to_decimal(weights::pages_per_tensor(t, tp)),
                       weights::is_aligned(t, tp) ? "yes" : "no");
        }
    }
    const auto summary = weights::model_padding_overhead(model, model.supported_tp);
    fmt::print("\npadding_overhead {:.4f}%\n", 100.0 * summary.overhead_fraction);
    return 0;
}

int exit_code_for(const Error& e) {
    switch (e.code()) {
    case ErrorCode::UsageError: return 2;
    case ErrorCode::ParseError:
    case ErrorCode::EmptyTrace:
    case ErrorCode::IoError: return 3;
    default: return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tensor-parallelism transformation planner and cluster simulator"};
    app.require_subcommand(1);

    RunOptions run;
    auto* run_cmd = app.add_subcommand("run", "Simulate a cluster serving a trace");
    auto* trace_opt = run_cmd->add_option("--trace", run.trace, "Trace file, one record per line");
    auto* synth_flag = run_cmd->add_flag("--synthetic", run.synthetic, "Generate a two-class Poisson workload");
    trace_opt->excludes(synth_flag);
    run_cmd->add_option("--short-rate", run.workload.short_rate, "Short requests per minute")->capture_default_str();
    run_cmd->add_option("--long-rate", run.workload.long_rate, "Long requests per minute")->capture_default_str();
    run_cmd->add_option("--short-len", run.workload.short_len, "Short request input tokens")->capture_default_str();
    run_cmd->add_option("--long-len", run.workload.long_len, "Long request input tokens")->capture_default_str();
    run_cmd->add_option("--duration", run.duration, "Seconds to simulate (synthetic default 600; trace default: drain)");
    run_cmd->add_option("--seed", run.workload.seed, "Workload seed")->capture_default_str();
    run_cmd->add_option("--policy", run.policy, "gyges|rr|llf")->capture_default_str();
    run_cmd->add_option("--hosts", run.hosts)->capture_default_str();
    run_cmd->add_option("--gpus-per-host", run.gpus_per_host)->capture_default_str();
    run_cmd->add_option("--initial-tp", run.initial_tp, "Degree of the starting instances")->capture_default_str();
    run_cmd->add_flag("--no-transform", run.no_transform, "Keep the starting degree for the whole run");
    run_cmd->add_option("--model", run.model, "Builtin model name or JSON config path")->capture_default_str();
    run_cmd->add_option("--threshold", run.threshold, "Scale-down load threshold")->capture_default_str();
    run_cmd->add_option("--overlap", run.overlap, "Fraction of transformation time hidden by compute")
        ->capture_default_str();
    run_cmd->add_option("--stagger", run.stagger, "Layers transformed per decode step")->capture_default_str();
    run_cmd->add_option("--out", run.out, "Metrics file (default stdout)");
    run_cmd->add_option("--format", run.format, "csv|jsonl")->capture_default_str();
    run_cmd->add_option("--event-log", run.event_log, "Write the JSON-lines event log here");

    PlanKvOptions kvo;
    auto* kv_cmd = app.add_subcommand("plan-kv", "Print the KV migration plan for one layer");
    kv_cmd->add_option("--model", kvo.model)->capture_default_str();
    kv_cmd->add_option("--tp-from", kvo.tp_from)->capture_default_str();
    kv_cmd->add_option("--tp-to", kvo.tp_to)->capture_default_str();
    kv_cmd->add_option("--requests", kvo.requests, "Requests per source instance")->capture_default_str();
    kv_cmd->add_option("--tokens", kvo.tokens, "Tokens per request")->capture_default_str();
    kv_cmd->add_option("--stages", kvo.stages, "Migration stages (0 = default)")->capture_default_str();
    kv_cmd->add_option("--tokens-per-block", kvo.tokens_per_block)->capture_default_str();
    kv_cmd->add_option("--layout", kvo.layout, "raw|page-friendly|header-centric")->capture_default_str();

    PlanWeightsOptions wo;
    auto* w_cmd = app.add_subcommand("plan-weights", "Print padding and the per-layer weight plan");
    w_cmd->add_option("--model", wo.model)->capture_default_str();
    w_cmd->add_option("--tp-from", wo.tp_from)->capture_default_str();
    w_cmd->add_option("--tp-to", wo.tp_to)->capture_default_str();
    w_cmd->add_flag("--no-padding", wo.no_padding);

    CheckFfnOptions fo;
    auto* f_cmd = app.add_subcommand("check-ffn", "Randomized padded/sharded FFN equivalence check");
    f_cmd->add_option("--trials", fo.trials)->capture_default_str();
    f_cmd->add_option("--seed", fo.seed)->capture_default_str();
    f_cmd->add_option("--tolerance", fo.tolerance)->capture_default_str();

    std::string tables_model = "qwen2.5-32b";
    auto* t_cmd = app.add_subcommand("tables", "Print derived capacity and page tables for a model");
    t_cmd->add_option("--model", tables_model)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*run_cmd) {
            if (run.trace.empty() && !run.synthetic) {
                throw Error(ErrorCode::UsageError, "run needs --trace <path> or --synthetic");
            }
            return run_sim(run);
        }
        if (*kv_cmd) {
            return plan_kv(kvo);
        }
        if (*w_cmd) {
            return plan_weights(wo);
        }
        if (*f_cmd) {
            return check_ffn(fo);
        }
        if (*t_cmd) {
            return tables(tables_model);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
