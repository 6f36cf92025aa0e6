// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "tpshift/error.hpp"
#include "tpshift/kv_layout.hpp"
#include "tpshift/model_config.hpp"
#include "tpshift/page_store.hpp"
#include "tpshift/weight_plan.hpp"

namespace tpshift::transform {

struct CostModel {
    double interconnect_bandwidth = 100e9;  ///< bytes/second per worker link
    double per_stage_latency = 50e-6;       ///< seconds per migration stage barrier
    double driver_call_cost = 20e-6;        ///< seconds per map or unmap batch
    double overlap_fraction = 0.95;         ///< share of step time hidden behind decode compute

    void validate() const {
        if (!(interconnect_bandwidth > 0.0)) {
            throw std::invalid_argument("interconnect_bandwidth must be positive");
        }
        if (!(overlap_fraction >= 0.0 && overlap_fraction <= 1.0)) {
            throw std::invalid_argument("overlap_fraction must lie in [0, 1]");
        }
        if (per_stage_latency < 0.0 || driver_call_cost < 0.0) {
            throw std::invalid_argument("latencies must be non-negative");
        }
    }

    /// Unhidden wall time of a step.
    double raw_seconds(Bytes bytes, int stages, int driver_calls) const {
        return static_cast<double>(bytes) / interconnect_bandwidth + stages * per_stage_latency +
               driver_calls * driver_call_cost;
    }
    double stall_seconds(Bytes bytes, int stages, int driver_calls) const {
        return (1.0 - overlap_fraction) * raw_seconds(bytes, stages, driver_calls);
    }
};

enum class Direction { ScaleUp, ScaleDown };
enum class Phase { Mlp, Kv };

inline std::string to_string(Direction d) { return d == Direction::ScaleUp ? "scale_up" : "scale_down"; }
inline std::string to_string(Phase p) { return p == Phase::Mlp ? "mlp" : "kv"; }

struct Step {
    int layer = 0;  ///< 1-based
    Phase phase = Phase::Mlp;
    int earliest_step = 0;  ///< decode steps after the transformation starts
    std::variant<weights::WeightTransformPlan, kv::MigrationPlan> plan;
    Bytes bytes_moved = 0;  ///< busiest worker
    int stages = 0;
    int driver_calls = 0;
    std::vector<Bytes> transient_bytes;  ///< per worker, mapped by this step before anything is released
};

struct TransformationPlan {
    Direction direction = Direction::ScaleUp;
    int tp_from = 1;
    int tp_to = 1;
    int stagger_width = 1;
    std::vector<Step> steps;
    std::vector<double> per_step_stall;
    /// Per worker: the most bytes newly mapped within one decode step.
    std::vector<Bytes> peak_extra_bytes;

    bool empty() const { return steps.empty(); }
    double total_stall() const {
        double s = 0.0;
        for (double v : per_step_stall) {
            s += v;
        }
        return s;
    }
    Bytes max_peak_extra_bytes() const {
        return peak_extra_bytes.empty() ? 0 : *std::max_element(peak_extra_bytes.begin(), peak_extra_bytes.end());
    }
};

/**
 * The devices of one host-local instance group, at page granularity: every
 * worker's memory, its MLP weight pages per layer, and its KV blocks per layer.
 */
struct GroupState {
    ModelConfig model;
    bool padded = true;
    kv::KvLayout layout;
    std::vector<PageSpace> spaces;                                   ///< [worker]
    std::vector<std::vector<kv::KvStore>> kv;                        ///< [layer][worker]
    std::vector<std::vector<std::vector<std::vector<PageRange>>>> mlp;  ///< [layer][worker][tensor]
    std::vector<int> layer_tp;                                       ///< [layer]

    int workers() const { return static_cast<int>(spaces.size()); }
    int layers() const { return static_cast<int>(layer_tp.size()); }

    /// TP degree shared by all layers; nullopt while a transformation is half done.
    std::optional<int> uniform_tp() const {
        if (layer_tp.empty() || std::any_of(layer_tp.begin(), layer_tp.end(), [&](int t) { return t != layer_tp[0]; })) {
            return std::nullopt;
        }
        return layer_tp[0];
    }
};

inline kv::KvLayout kv_layout_for(const ModelConfig& model, int tokens_per_block = 16) {
    return kv::KvLayout::header_centric(tokens_per_block, model.num_kv_heads, model.head_dim, model.element_bytes);
}

/**
 * Maps weights for `workers / tp` instances of degree `tp`. Non-MLP weights
 * are replicated per worker; MLP tensors get their (padded) shard.
 */
inline GroupState make_group(const ModelConfig& model, int workers, int tp, Bytes capacity, Bytes page_size,
                             const kv::KvLayout& layout, bool padded, bool map_non_mlp = true) {
    if (tp < 1 || workers < 1 || workers % tp != 0) {
        throw Error(ErrorCode::IncompatibleGroup,
                    std::to_string(workers) + " workers do not form tp " + std::to_string(tp) + " instances");
    }
    GroupState g;
    g.model = model;
    g.padded = padded;
    g.layout = layout;
    g.layer_tp.assign(static_cast<std::size_t>(model.num_layers), tp);
    const auto tensors = weights::mlp_tensors(model);
    std::vector<weights::PaddingPlan> pads;
    for (const auto& t : tensors) {
        pads.push_back(weights::make_padding_plan(t, model.supported_tp, page_size));
    }
    for (int w = 0; w < workers; ++w) {
        g.spaces.emplace_back(capacity, page_size);
        if (map_non_mlp && weights::non_mlp_bytes(model) > 0) {
            g.spaces.back().alloc(weights::non_mlp_bytes(model), "w" + std::to_string(w) + "/non_mlp", PageUse::Weights);
        }
    }
    g.mlp.resize(static_cast<std::size_t>(model.num_layers));
    g.kv.resize(static_cast<std::size_t>(model.num_layers));
    for (int l = 0; l < model.num_layers; ++l) {
        g.mlp[l].resize(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            g.kv[l].emplace_back(layout, w, l + 1);
            for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
                const Bytes bytes = weights::resident_shard_bytes(tensors[ti], tp, padded ? &pads[ti] : nullptr, w % tp);
                g.mlp[l][w].push_back({g.spaces[w].alloc(bytes,
                                                         "mlp/w" + std::to_string(w) + "/l" + std::to_string(l + 1) +
                                                             "/" + tensors[ti].name,
                                                         PageUse::Weights)});
            }
        }
    }
    return g;
}

/// Places `tokens` tokens of `request` on instance `instance` (0-based) in every layer.
inline void add_request(GroupState& g, int request, int tokens, int instance) {
    const auto tp = g.uniform_tp();
    if (!tp) {
        throw std::logic_error("cannot add requests while a transformation is in progress");
    }
    if (instance < 0 || (instance + 1) * *tp > g.workers()) {
        throw std::invalid_argument("instance " + std::to_string(instance) + " outside the group");
    }
    for (int l = 0; l < g.layers(); ++l) {
        for (int i = 0; i < *tp; ++i) {
            const int w = instance * *tp + i;
            kv::fill_request(g.kv[l][w], g.spaces[w], request, tokens,
                             kv::retained_headers(i + 1, g.layout.num_headers, *tp));
        }
    }
}

namespace detail {

inline std::size_t total_pages(const std::vector<PageRange>& ranges) {
    std::size_t n = 0;
    for (const auto& r : ranges) {
        n += r.length;
    }
    return n;
}

inline void free_front(std::vector<PageRange>& ranges, std::size_t pages, PageSpace& space) {
    while (pages > 0) {
        PageRange& r = ranges.front();
        const std::size_t n = std::min(pages, r.length);
        space.unmap(r.subrange(0, n));
        r = r.subrange(n, r.length - n);
        if (r.length == 0) {
            ranges.erase(ranges.begin());
        }
        pages -= n;
    }
}

inline void free_back(std::vector<PageRange>& ranges, std::size_t pages, PageSpace& space) {
    while (pages > 0) {
        PageRange& r = ranges.back();
        const std::size_t n = std::min(pages, r.length);
        space.unmap(r.subrange(r.length - n, n));
        r = r.subrange(0, r.length - n);
        if (r.length == 0) {
            ranges.pop_back();
        }
        pages -= n;
    }
}

/// Applies one layer's MLP plan; returns the bytes each worker newly mapped.
inline std::vector<Bytes> apply_weight_step(GroupState& g, const weights::WeightTransformPlan& plan, int layer,
                                            int tp_from, int tp_to) {
    const auto tensors = weights::mlp_tensors(g.model);
    std::vector<Bytes> mapped(static_cast<std::size_t>(g.workers()), 0);
    const int span = std::max(tp_from, tp_to);
    for (int base = 0; base < g.workers(); base += span) {
        for (const auto& mv : plan.moves) {
            const int w = base + mv.worker;
            PageSpace& space = g.spaces[w];
            const Bytes ps = space.page_size();
            const auto ti = static_cast<std::size_t>(
                std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == mv.tensor; }) -
                tensors.begin());
            auto& ranges = g.mlp[layer - 1][w][ti];
            const std::size_t resident = total_pages(ranges);
            std::optional<PageRange> fresh;
            if (mv.alloc_pages > 0) {
                fresh = space.alloc(mv.alloc_pages * ps,
                                    "mlp/w" + std::to_string(w) + "/l" + std::to_string(layer) + "/" + mv.tensor +
                                        "/tp" + std::to_string(tp_to),
                                    PageUse::Weights);
                mapped[w] += mv.alloc_pages * ps;
            }
            switch (plan.kind) {
            case weights::WeightPlanKind::InPlace:
            case weights::WeightPlanKind::PartialSwap: {
                const bool swap = plan.kind == weights::WeightPlanKind::PartialSwap;
                const std::size_t head =
                    std::min<std::size_t>(swap ? ceil_div(mv.kept_offset, ps) : mv.kept_offset / ps, resident);
                const std::size_t keep_end =
                    swap ? (mv.kept_offset + mv.kept_length) / ps : ceil_div(mv.kept_offset + mv.kept_length, ps);
                const std::size_t tail = resident - std::max(head, std::min(keep_end, resident));
                free_front(ranges, head, space);
                free_back(ranges, tail, space);
                break;
            }
            case weights::WeightPlanKind::WholeCopy:
            case weights::WeightPlanKind::Receive:
                if (mv.freed_pages > 0) {
                    free_front(ranges, total_pages(ranges), space);
                }
                break;
            }
            if (fresh) {
                ranges.push_back(*fresh);
            }
        }
    }
    return mapped;
}

inline std::vector<Bytes> apply_kv_step(GroupState& g, const kv::MigrationPlan& plan, int layer) {
    auto& stores = g.kv[layer - 1];
    kv::apply_migration(plan, stores, g.spaces);
    return plan.peak_extra_bytes;
}

inline Bytes max_of(const std::vector<Bytes>& v) { return v.empty() ? 0 : *std::max_element(v.begin(), v.end()); }

}  // namespace detail

/**
 * Orders and prices a whole-group transformation.
 *
 * Layers go last to first. On scale-up a layer's MLP shrinks before its KV
 * migrates, so the KV receive buffers land in pages the weights just gave
 * up. Layer l may start `(L - l) / stagger_width` decode steps after the
 * transformation begins, so at most `stagger_width` layers allocate per step.
 * Planning replays every step on a copy of `g`, so each step's page ranges
 * are the ones execute_plan will see.
 */
inline TransformationPlan build_plan(const GroupState& g, int tp_from, int tp_to, const CostModel& cost,
                                     int stagger_width = 1, int stage_count = 0) {
    cost.validate();
    if (stagger_width < 1) {
        throw std::invalid_argument("stagger_width must be >= 1");
    }
    TransformationPlan plan;
    plan.direction = tp_to >= tp_from ? Direction::ScaleUp : Direction::ScaleDown;
    plan.tp_from = tp_from;
    plan.tp_to = tp_to;
    plan.stagger_width = stagger_width;
    plan.peak_extra_bytes.assign(static_cast<std::size_t>(g.workers()), 0);
    if (tp_from == tp_to) {
        return plan;
    }
    weights::require_group(tp_from, tp_to);
    if (g.uniform_tp() != tp_from || g.workers() % tp_from != 0 || g.workers() % tp_to != 0) {
        throw Error(ErrorCode::IncompatibleGroup, "group of " + std::to_string(g.workers()) +
                                                      " workers is not at tp " + std::to_string(tp_from) +
                                                      " or cannot form tp " + std::to_string(tp_to));
    }
    const int stages = stage_count > 0 ? stage_count : kv::default_stage_count(std::max(tp_from, tp_to));
    const Bytes ps = g.spaces.front().page_size();
    const auto weight_plans = plan.direction == Direction::ScaleUp
                                  ? weights::plan_weight_scale_up(g.model, tp_from, tp_to, g.padded, ps)
                                  : weights::plan_weight_scale_down(g.model, tp_from, tp_to, g.padded, ps);

    GroupState sim = g;
    const int layers = g.layers();
    std::map<int, std::vector<Bytes>> per_decode_step;
    for (int layer = layers; layer >= 1; --layer) {
        const int earliest = (layers - layer) / stagger_width;
        auto& bucket = per_decode_step[earliest];
        bucket.resize(static_cast<std::size_t>(g.workers()), 0);

        Step mlp;
        mlp.layer = layer;
        mlp.phase = Phase::Mlp;
        mlp.earliest_step = earliest;
        const auto& wp = weight_plans[static_cast<std::size_t>(layer - 1)];
        mlp.transient_bytes = detail::apply_weight_step(sim, wp, layer, tp_from, tp_to);
        for (int w = 0; w < std::max(tp_from, tp_to); ++w) {
            mlp.bytes_moved = std::max(mlp.bytes_moved, wp.worker_copied_bytes(w));
        }
        mlp.stages = 1;
        const bool any_alloc = std::any_of(wp.moves.begin(), wp.moves.end(), [](const auto& m) { return m.alloc_pages > 0; });
        const bool any_free = std::any_of(wp.moves.begin(), wp.moves.end(), [](const auto& m) { return m.freed_pages > 0; });
        mlp.driver_calls = (any_alloc ? 1 : 0) + (any_free ? 1 : 0);
        mlp.plan = wp;

        Step kvs;
        kvs.layer = layer;
        kvs.phase = Phase::Kv;
        kvs.earliest_step = earliest;
        auto& stores = sim.kv[static_cast<std::size_t>(layer - 1)];
        kv::MigrationPlan mp = g.layout.header_centric_order()
                                   ? kv::plan_migration_inplace(stores, sim.spaces, tp_from, tp_to, stages)
                                   : kv::plan_migration_trim(stores, sim.spaces, tp_from, tp_to);
        kvs.transient_bytes = detail::apply_kv_step(sim, mp, layer);
        // A trim pass is one more barrier plus a local copy of the retained bytes.
        kvs.bytes_moved = mp.busiest_worker_traffic() + detail::max_of(mp.trim_copies);
        kvs.stages = static_cast<int>(mp.stages.size()) + (mp.trims.empty() ? 0 : 1);
        kvs.driver_calls = mp.driver_calls();
        kvs.plan = std::move(mp);
        sim.layer_tp[static_cast<std::size_t>(layer - 1)] = tp_to;

        for (Step* s : {&mlp, &kvs}) {
            for (std::size_t w = 0; w < bucket.size(); ++w) {
                bucket[w] += s->transient_bytes[w];
            }
            plan.per_step_stall.push_back(cost.stall_seconds(s->bytes_moved, s->stages, s->driver_calls));
            plan.steps.push_back(std::move(*s));
        }
    }
    for (const auto& [step, bytes] : per_decode_step) {
        for (std::size_t w = 0; w < bytes.size(); ++w) {
            plan.peak_extra_bytes[w] = std::max(plan.peak_extra_bytes[w], bytes[w]);
        }
    }
    return plan;
}

/// Violations of the step-ordering rules; empty when the plan is well formed.
inline std::vector<std::string> check_plan(const TransformationPlan& plan) {
    std::vector<std::string> problems;
    std::map<int, int> layers_per_step;
    int previous_layer = INT32_MAX;
    int previous_earliest = 0;
    std::map<int, std::vector<Phase>> phases;
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const auto& s = plan.steps[i];
        if (s.layer > previous_layer) {
            problems.push_back("step " + std::to_string(i) + ": layer " + std::to_string(s.layer) + " after layer " +
                               std::to_string(previous_layer));
        }
        if (s.layer != previous_layer) {
            if (phases.count(s.layer) != 0) {
                problems.push_back("layer " + std::to_string(s.layer) + " is not contiguous");
            }
            ++layers_per_step[s.earliest_step];
        }
        if (s.earliest_step < previous_earliest) {
            problems.push_back("step " + std::to_string(i) + ": earliest_step goes backwards");
        }
        phases[s.layer].push_back(s.phase);
        previous_layer = s.layer;
        previous_earliest = s.earliest_step;
    }
    for (const auto& [layer, ph] : phases) {
        if (plan.direction == Direction::ScaleUp) {
            const auto mlp = std::find(ph.begin(), ph.end(), Phase::Mlp);
            const auto kvp = std::find(ph.begin(), ph.end(), Phase::Kv);
            if (mlp == ph.end() || kvp == ph.end() || kvp < mlp) {
                problems.push_back("layer " + std::to_string(layer) + ": kv does not follow mlp");
            }
        }
    }
    for (const auto& [step, n] : layers_per_step) {
        if (n > plan.stagger_width) {
            problems.push_back("decode step " + std::to_string(step) + " starts " + std::to_string(n) +
                               " layers, more than the stagger width");
        }
    }
    if (plan.per_step_stall.size() != plan.steps.size()) {
        problems.emplace_back("per_step_stall does not match the step list");
    }
    return problems;
}

struct ExecutionResult {
    std::vector<std::pair<int, double>> stall_schedule;  ///< (decode step, stall seconds)
    int completed_layers = 0;
    bool finished = false;
    std::vector<Bytes> high_water_increase;  ///< per worker
};

/**
 * Runs the steps of `plan` that fall due by `until_step` (all of them when
 * unset); the plan starts at decode step `current_step`. A layer's steps
 * either all land or none do: on OutOfMemory the layer is rolled back and
 * the error rethrown, leaving earlier layers transformed.
 */
inline ExecutionResult execute_plan(const TransformationPlan& plan, GroupState& g, int current_step = 0,
                                    std::optional<int> until_step = std::nullopt) {
    ExecutionResult result;
    std::vector<Bytes> hwm_before;
    for (const auto& s : g.spaces) {
        hwm_before.push_back(s.high_water_mark());
    }
    auto finish = [&] {
        for (std::size_t w = 0; w < g.spaces.size(); ++w) {
            result.high_water_increase.push_back(g.spaces[w].high_water_mark() - hwm_before[w]);
        }
    };

    std::size_t i = 0;
    while (i < plan.steps.size()) {
        const int layer = plan.steps[i].layer;
        const int due = current_step + plan.steps[i].earliest_step;
        if (until_step && due > *until_step) {
            break;
        }
        const auto li = static_cast<std::size_t>(layer - 1);
        const auto spaces = g.spaces;
        const auto kv_layer = g.kv[li];
        const auto mlp_layer = g.mlp[li];
        const int tp_before = g.layer_tp[li];
        std::size_t j = i;
        double stall = 0.0;
        try {
            for (; j < plan.steps.size() && plan.steps[j].layer == layer; ++j) {
                const auto& s = plan.steps[j];
                if (const auto* wp = std::get_if<weights::WeightTransformPlan>(&s.plan)) {
                    detail::apply_weight_step(g, *wp, layer, plan.tp_from, plan.tp_to);
                } else {
                    detail::apply_kv_step(g, std::get<kv::MigrationPlan>(s.plan), layer);
                }
                stall += plan.per_step_stall[j];
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::OutOfMemory && e.code() != ErrorCode::InsufficientStageBuffer) {
                throw;
            }
            g.spaces = spaces;
            g.kv[li] = kv_layer;
            g.mlp[li] = mlp_layer;
            g.layer_tp[li] = tp_before;
            throw;
        }
        g.layer_tp[li] = plan.tp_to;
        ++result.completed_layers;
        if (!result.stall_schedule.empty() && result.stall_schedule.back().first == due) {
            result.stall_schedule.back().second += stall;
        } else {
            result.stall_schedule.emplace_back(due, stall);
        }
        i = j;
    }
    result.finished = i == plan.steps.size();
    finish();
    return result;
}

struct CostSummary {
    double total_stall = 0.0;
    double total_raw_seconds = 0.0;
    Bytes weight_bytes_moved = 0;
    Bytes kv_bytes_moved = 0;
    std::size_t steps = 0;
};

inline CostSummary transformation_cost_summary(const TransformationPlan& plan, const CostModel& cost) {
    CostSummary s;
    s.steps = plan.steps.size();
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const auto& st = plan.steps[i];
        s.total_stall += plan.per_step_stall[i];
        s.total_raw_seconds += cost.raw_seconds(st.bytes_moved, st.stages, st.driver_calls);
        (st.phase == Phase::Mlp ? s.weight_bytes_moved : s.kv_bytes_moved) += st.bytes_moved;
    }
    return s;
}

/**
 * Closed-form price of a transformation for callers that do not track
 * pages, such as the cluster simulator. Assumes requests are spread evenly
 * over the source instances' workers; on balanced groups it agrees with
 * transformation_cost_summary(build_plan(...)).
 */
inline CostSummary estimate_transformation(const ModelConfig& model, int tp_from, int tp_to,
                                           const std::vector<std::vector<int>>& tokens_by_instance,
                                           const CostModel& cost, int stage_count = 0, bool padded = true,
                                           int tokens_per_block = 16, Bytes page_size = kDefaultPageSize) {
    cost.validate();
    CostSummary s;
    if (tp_from == tp_to) {
        return s;
    }
    weights::require_group(tp_from, tp_to);
    const int stages = stage_count > 0 ? stage_count : kv::default_stage_count(std::max(tp_from, tp_to));
    const auto layout = kv_layout_for(model, tokens_per_block);
    const auto wp = tp_to > tp_from ? weights::plan_weight_scale_up(model, tp_from, tp_to, padded, page_size)
                                    : weights::plan_weight_scale_down(model, tp_from, tp_to, padded, page_size);
    const auto& layer_plan = wp.front();
    Bytes w_bytes = 0;
    for (int w = 0; w < std::max(tp_from, tp_to); ++w) {
        w_bytes = std::max(w_bytes, layer_plan.worker_copied_bytes(w));
    }
    const bool any_alloc = std::any_of(layer_plan.moves.begin(), layer_plan.moves.end(), [](const auto& m) { return m.alloc_pages > 0; });
    const bool any_free = std::any_of(layer_plan.moves.begin(), layer_plan.moves.end(), [](const auto& m) { return m.freed_pages > 0; });
    const int w_calls = (any_alloc ? 1 : 0) + (any_free ? 1 : 0);

    // Per-layer bytes a source worker holds, and the share of it that leaves.
    Bytes kv_bytes = 0;
    for (const auto& inst : tokens_by_instance) {
        Bytes held = 0;
        for (int t : inst) {
            held += ceil_div(static_cast<Bytes>(t), static_cast<Bytes>(tokens_per_block)) * layout.block_bytes() /
                    static_cast<Bytes>(tp_from);
        }
        const Bytes moved = tp_to > tp_from ? held - held * static_cast<Bytes>(tp_from) / static_cast<Bytes>(tp_to)
                                            : held - held * static_cast<Bytes>(tp_to) / static_cast<Bytes>(tp_from);
        kv_bytes = std::max(kv_bytes, moved);
    }
    const int kv_stages = kv_bytes > 0 ? stages : 0;
    const int kv_calls = 2 * kv_stages;
    const auto layers = static_cast<std::size_t>(model.num_layers);
    s.steps = 2 * layers;
    s.weight_bytes_moved = w_bytes * layers;
    s.kv_bytes_moved = kv_bytes * layers;
    s.total_raw_seconds = static_cast<double>(layers) *
                          (cost.raw_seconds(w_bytes, 1, w_calls) + cost.raw_seconds(kv_bytes, kv_stages, kv_calls));
    s.total_stall = static_cast<double>(layers) *
                    (cost.stall_seconds(w_bytes, 1, w_calls) + cost.stall_seconds(kv_bytes, kv_stages, kv_calls));
    return s;
}

/// Structured text form of a plan, one step per line.
inline std::string to_text(const TransformationPlan& plan) {
    std::ostringstream os;
    os << "transformation " << to_string(plan.direction) << " tp " << plan.tp_from << "->" << plan.tp_to
       << " stagger " << plan.stagger_width << " steps " << plan.steps.size() << '\n';
    for (std::size_t i = 0; i < plan.steps.size(); ++i) {
        const auto& s = plan.steps[i];
        os << "step " << i << " layer " << s.layer << ' ' << to_string(s.phase) << " earliest " << s.earliest_step
           << " bytes " << s.bytes_moved << " stages " << s.stages << " calls " << s.driver_calls << " stall_us "
           << static_cast<long long>(plan.per_step_stall[i] * 1e6 + 0.5) << '\n';
    }
    for (std::size_t w = 0; w < plan.peak_extra_bytes.size(); ++w) {
        os << "worker " << w << " peak_extra_bytes " << plan.peak_extra_bytes[w] << '\n';
    }
    return os.str();
}

}  // namespace tpshift::transform
