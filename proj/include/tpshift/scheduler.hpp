// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "tpshift/error.hpp"

namespace tpshift::sched {

/// Per-degree instance performance. Defaults are the measured Qwen2.5-32B / H20 figures.
struct PerfModel {
    std::map<int, double> throughput_by_tp{{1, 448.0}, {2, 670.0}, {4, 767.0}};
    /// Tokens/second while prefilling; at TP1 a 3.75K-token prompt finishes in about 8.4 s.
    std::map<int, double> prefill_rate_by_tp{{1, 448.0}, {2, 670.0}, {4, 767.0}};
    std::map<int, long long> kv_capacity_by_tp{{1, 3750}, {2, 41250}, {4, 120500}};

    void validate() const {
        if (throughput_by_tp.empty() || throughput_by_tp.size() != prefill_rate_by_tp.size() ||
            throughput_by_tp.size() != kv_capacity_by_tp.size()) {
            throw std::invalid_argument("perf model tables must cover the same TP degrees");
        }
        long long previous = 0;
        for (const auto& [tp, cap] : kv_capacity_by_tp) {
            if (tp < 1 || !(throughput(tp) > 0.0) || !(prefill_rate(tp) > 0.0) || cap <= 0) {
                throw std::invalid_argument("perf model entries must be positive");
            }
            if (cap < previous) {
                throw std::invalid_argument("kv capacity must not shrink as TP grows");
            }
            previous = cap;
        }
    }

    double throughput(int tp) const { return lookup(throughput_by_tp, tp); }
    double prefill_rate(int tp) const { return lookup(prefill_rate_by_tp, tp); }
    long long kv_capacity(int tp) const { return lookup(kv_capacity_by_tp, tp); }
    bool supports(int tp) const { return kv_capacity_by_tp.count(tp) != 0; }
    int min_tp() const { return kv_capacity_by_tp.begin()->first; }
    int max_tp() const { return kv_capacity_by_tp.rbegin()->first; }

    /// Smallest degree whose capacity holds `tokens`.
    std::optional<int> tp_for(long long tokens) const {
        for (const auto& [tp, cap] : kv_capacity_by_tp) {
            if (cap >= tokens) {
                return tp;
            }
        }
        return std::nullopt;
    }

private:
    template <typename Map>
    static typename Map::mapped_type lookup(const Map& m, int tp) {
        auto it = m.find(tp);
        if (it == m.end()) {
            throw std::invalid_argument("no performance data for tp " + std::to_string(tp));
        }
        return it->second;
    }
};

struct Request {
    int id = 0;
    double arrival_time = 0.0;
    int input_tokens = 1;
    int output_tokens = 1;
};

/// What an instance holds for one request.
struct ActiveRequest {
    int id = 0;
    long long kv_tokens = 0;         ///< reserved KV tokens
    long long remaining_tokens = 0;  ///< prefill plus decode work still to do
    bool long_request = false;
};

struct InstanceState {
    int id = 0;
    int host = 0;
    int tp = 1;
    std::vector<int> gpu_ids;  ///< host-local, consecutive
    long long kv_capacity_tokens = 0;
    long long kv_used_tokens = 0;
    std::vector<ActiveRequest> active_requests;
    std::vector<ActiveRequest> waiting_requests;  ///< placed here, KV not yet reserved
    double throughput_capacity = 0.0;
    bool transforming = false;
    int transform_target_tp = 0;
    bool reserved_for_transform = false;

    int first_gpu() const { return gpu_ids.empty() ? 0 : gpu_ids.front(); }

    long long waiting_kv_tokens() const {
        long long n = 0;
        for (const auto& r : waiting_requests) {
            n += r.kv_tokens;
        }
        return n;
    }
    long long pending_work_tokens() const {
        long long n = 0;
        for (const auto* list : {&active_requests, &waiting_requests}) {
            for (const auto& r : *list) {
                n += r.remaining_tokens;
            }
        }
        return n;
    }
    bool holds_long_request() const {
        auto is_long = [](const ActiveRequest& r) { return r.long_request; };
        return std::any_of(active_requests.begin(), active_requests.end(), is_long) ||
               std::any_of(waiting_requests.begin(), waiting_requests.end(), is_long);
    }
};

struct ClusterView {
    std::vector<InstanceState> instances;  ///< sorted by id
    int hosts = 1;
    int gpus_per_host = 8;
    double now = 0.0;
    int deferred_long_requests = 0;  ///< long requests parked while a merge completes

    const InstanceState* find(int id) const {
        auto it = std::find_if(instances.begin(), instances.end(), [&](const InstanceState& i) { return i.id == id; });
        return it == instances.end() ? nullptr : &*it;
    }
};

enum class Policy { Gyges, RoundRobin, LeastLoad };

inline std::string to_string(Policy p) {
    switch (p) {
    case Policy::Gyges: return "gyges";
    case Policy::RoundRobin: return "rr";
    case Policy::LeastLoad: return "llf";
    }
    return "?";
}

inline Policy parse_policy(const std::string& s) {
    if (s == "gyges") {
        return Policy::Gyges;
    }
    if (s == "rr") {
        return Policy::RoundRobin;
    }
    if (s == "llf") {
        return Policy::LeastLoad;
    }
    throw Error(ErrorCode::UsageError, "unknown policy '" + s + "' (expected gyges, rr or llf)");
}

struct SchedulerConfig {
    Policy policy = Policy::Gyges;
    /// Per-fragment load below which a TP>1 instance may split into TP1 instances.
    double scale_down_threshold = 0.5;
    double reservation_cooldown_s = 60.0;
    double output_share = 0.103;  ///< output tokens as a share of total sequence length
    long long expected_output_cap = 8192;
    double load_horizon_s = 60.0;  ///< work an instance can clear in this window counts as load 1

    void validate() const {
        if (!(scale_down_threshold > 0.0 && scale_down_threshold < 1.0)) {
            throw std::invalid_argument("scale_down_threshold must lie in (0, 1)");
        }
        if (!(output_share >= 0.0 && output_share < 1.0) || expected_output_cap < 0 || !(load_horizon_s > 0.0) ||
            reservation_cooldown_s < 0.0) {
            throw std::invalid_argument("invalid scheduler configuration");
        }
    }
};

enum class DecisionKind { Place, Queue, ScaleUp, Defer };

inline std::string to_string(DecisionKind k) {
    switch (k) {
    case DecisionKind::Place: return "place";
    case DecisionKind::Queue: return "queue";
    case DecisionKind::ScaleUp: return "scale_up";
    case DecisionKind::Defer: return "defer";
    }
    return "?";
}

/// GPUs [first_gpu, first_gpu + target_tp) of `host`, currently served by `instances`.
struct ScaleUpGroup {
    int host = 0;
    int first_gpu = 0;
    int target_tp = 1;
    std::vector<int> instances;
};

/**
 * Place: admit now (KV fits). Queue: wait on `instance` until KV frees up.
 * ScaleUp: merge `group`; the request goes to the merged instance.
 * Defer: hold until a merge in progress finishes.
 */
struct Decision {
    DecisionKind kind = DecisionKind::Place;
    int instance = -1;
    ScaleUpGroup group;
};

struct ScaleDownDecision {
    int instance = 0;
    int target_tp = 1;
    std::vector<std::vector<int>> fragments;  ///< request ids per resulting instance
};

/**
 * Assigns requests to `parts` fragments: largest first, each to the fragment
 * with the fewest KV tokens so far (lowest index on ties).
 */
inline std::vector<std::vector<ActiveRequest>> ideal_split(std::vector<ActiveRequest> requests, int parts) {
    std::stable_sort(requests.begin(), requests.end(),
                     [](const ActiveRequest& a, const ActiveRequest& b) { return a.kv_tokens > b.kv_tokens; });
    std::vector<std::vector<ActiveRequest>> out(static_cast<std::size_t>(parts));
    std::vector<long long> load(static_cast<std::size_t>(parts), 0);
    for (const auto& r : requests) {
        const auto f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
        load[f] += r.kv_tokens;
        out[f].push_back(r);
    }
    return out;
}

class Scheduler {
public:
    Scheduler(SchedulerConfig config, PerfModel perf) : config_(config), perf_(std::move(perf)) {
        config_.validate();
        perf_.validate();
    }

    const SchedulerConfig& config() const { return config_; }
    const PerfModel& perf() const { return perf_; }

    /// Output the scheduler budgets for, since only the input length is known on arrival.
    long long expected_output(int input_tokens) const {
        const double e = std::ceil(input_tokens * config_.output_share / (1.0 - config_.output_share));
        return std::min(static_cast<long long>(e), config_.expected_output_cap);
    }
    long long kv_need(const Request& r) const { return r.input_tokens + expected_output(r.input_tokens); }
    /// A request the smallest instances cannot hold.
    bool is_long(const Request& r) const { return kv_need(r) > perf_.kv_capacity(perf_.min_tp()); }

    /**
     * max(KV ratio, work ratio) with `req` added; nullopt when its KV would
     * not fit next to what the instance already holds or has waiting.
     */
    std::optional<double> estimate_load(const Request* req, const InstanceState& inst) const {
        const long long need = req ? kv_need(*req) : 0;
        const long long kv = inst.kv_used_tokens + inst.waiting_kv_tokens() + need;
        if (kv > inst.kv_capacity_tokens) {
            return std::nullopt;
        }
        return load_of(kv, inst.pending_work_tokens() + need, inst.kv_capacity_tokens, inst.throughput_capacity);
    }

    /// Load with no overload cut-off; what a least-load balancer looks at.
    double current_load(const InstanceState& inst) const {
        return load_of(inst.kv_used_tokens + inst.waiting_kv_tokens(), inst.pending_work_tokens(),
                       inst.kv_capacity_tokens, inst.throughput_capacity);
    }

    void note_arrival(const Request& r, double now) {
        if (is_long(r)) {
            last_long_ = now;
        }
    }

    /// Throws Unschedulable when no degree can ever hold the request.
    Decision schedule_request(const Request& req, const ClusterView& view) {
        const long long need = kv_need(req);
        const auto target = perf_.tp_for(need);
        if (!target) {
            throw Error(ErrorCode::Unschedulable, "request " + std::to_string(req.id) + " needs " +
                                                      std::to_string(need) + " KV tokens, more than tp " +
                                                      std::to_string(perf_.max_tp()) + " holds");
        }
        switch (config_.policy) {
        case Policy::Gyges: return gyges(req, view, *target);
        case Policy::RoundRobin: return round_robin(req, view, *target);
        case Policy::LeastLoad: return least_load(req, view, *target);
        }
        return {};
    }

    /**
     * Safe split of a TP>1 instance back to TP1: only when nothing long is
     * running or waiting and every fragment of the ideal split stays under
     * the threshold.
     */
    std::optional<ScaleDownDecision> schedule_parallelism(const InstanceState& inst, const ClusterView& view) const {
        if (inst.tp <= 1 || inst.transforming || inst.holds_long_request() || view.deferred_long_requests > 0 ||
            !inst.waiting_requests.empty()) {
            return std::nullopt;
        }
        const int tp1 = perf_.min_tp();
        const int parts = inst.tp / tp1;
        const auto split = ideal_split(inst.active_requests, parts);
        ScaleDownDecision d;
        d.instance = inst.id;
        d.target_tp = tp1;
        for (const auto& frag : split) {
            long long kv = 0;
            long long work = 0;
            std::vector<int> ids;
            for (const auto& r : frag) {
                kv += r.kv_tokens;
                work += r.remaining_tokens;
                ids.push_back(r.id);
            }
            if (kv > perf_.kv_capacity(tp1) ||
                load_of(kv, work, perf_.kv_capacity(tp1), perf_.throughput(tp1)) >= config_.scale_down_threshold) {
                return std::nullopt;
            }
            d.fragments.push_back(std::move(ids));
        }
        return d;
    }

    /**
     * Instances to hold back for the next merge: while long requests have
     * been seen within the cool-down and no instance above TP1 exists, the
     * emptiest mergeable group on one host. Gyges only.
     */
    std::vector<int> update_reserve(const ClusterView& view) const {
        if (config_.policy != Policy::Gyges || !last_long_ || view.now - *last_long_ >= config_.reservation_cooldown_s) {
            return {};
        }
        const int tp1 = perf_.min_tp();
        if (std::any_of(view.instances.begin(), view.instances.end(),
                        [&](const InstanceState& i) { return i.tp > tp1 || i.transforming; })) {
            return {};
        }
        const int target = perf_.max_tp();
        auto groups = mergeable_groups(view, target);
        if (groups.empty()) {
            return {};
        }
        return best_by_kv(view, groups)->instances;
    }

    /// Aligned host-local windows of `target_tp` GPUs whose instances are all smaller and idle of transformations.
    std::vector<ScaleUpGroup> mergeable_groups(const ClusterView& view, int target_tp) const {
        std::vector<ScaleUpGroup> out;
        if (target_tp > view.gpus_per_host) {
            return out;
        }
        for (int h = 0; h < view.hosts; ++h) {
            for (int first = 0; first + target_tp <= view.gpus_per_host; first += target_tp) {
                ScaleUpGroup g{h, first, target_tp, {}};
                bool ok = true;
                int covered = 0;
                for (const auto& inst : view.instances) {
                    if (inst.host != h) {
                        continue;
                    }
                    const int lo = inst.first_gpu();
                    const int hi = lo + static_cast<int>(inst.gpu_ids.size());
                    if (hi <= first || lo >= first + target_tp) {
                        continue;
                    }
                    if (lo < first || hi > first + target_tp || inst.tp >= target_tp || inst.transforming) {
                        ok = false;
                        break;
                    }
                    covered += hi - lo;
                    g.instances.push_back(inst.id);
                }
                if (ok && covered == target_tp) {
                    out.push_back(std::move(g));
                }
            }
        }
        return out;
    }

private:
    double load_of(long long kv, long long work, long long capacity, double throughput) const {
        const double kv_ratio = static_cast<double>(kv) / static_cast<double>(capacity);
        const double work_ratio = static_cast<double>(work) / (throughput * config_.load_horizon_s);
        return std::max(kv_ratio, work_ratio);
    }

    long long group_kv(const ClusterView& view, const ScaleUpGroup& g) const {
        long long kv = 0;
        for (int id : g.instances) {
            const auto* i = view.find(id);
            kv += i->kv_used_tokens + i->waiting_kv_tokens();
        }
        return kv;
    }

    const ScaleUpGroup* best_by_kv(const ClusterView& view, const std::vector<ScaleUpGroup>& groups) const {
        const ScaleUpGroup* best = nullptr;
        long long best_kv = 0;
        for (const auto& g : groups) {
            const long long kv = group_kv(view, g);
            if (!best || kv < best_kv) {
                best = &g;
                best_kv = kv;
            }
        }
        return best;
    }

    bool merge_pending(const ClusterView& view, int target_tp) const {
        return std::any_of(view.instances.begin(), view.instances.end(), [&](const InstanceState& i) {
            return i.transforming && i.transform_target_tp >= target_tp;
        });
    }

    /// Instances whose full capacity could ever hold `need`, least loaded first.
    const InstanceState* least_loaded_capable(const ClusterView& view, long long need) const {
        const InstanceState* best = nullptr;
        double best_load = 0.0;
        for (const auto& i : view.instances) {
            if (i.transforming || i.kv_capacity_tokens < need) {
                continue;
            }
            const double l = current_load(i);
            if (!best || l < best_load) {
                best = &i;
                best_load = l;
            }
        }
        return best;
    }

    /// Merge fallback shared by all policies once the chosen instance cannot take the request.
    Decision scale_up_or_wait(const Request& req, const ClusterView& view, int target, const InstanceState* chosen) {
        auto groups = mergeable_groups(view, target);
        if (chosen && chosen->tp < target) {
            const int first = chosen->first_gpu() / target * target;
            for (const auto& g : groups) {
                if (g.host == chosen->host && g.first_gpu == first) {
                    return {DecisionKind::ScaleUp, -1, g};
                }
            }
        }
        if (!groups.empty()) {
            return {DecisionKind::ScaleUp, -1, *best_by_kv(view, groups)};
        }
        if (const auto* q = least_loaded_capable(view, kv_need(req))) {
            return {DecisionKind::Queue, q->id, {}};
        }
        if (merge_pending(view, target)) {
            return {DecisionKind::Defer, -1, {}};
        }
        throw Error(ErrorCode::Unschedulable,
                    "request " + std::to_string(req.id) + ": no instance or mergeable group can hold it");
    }

    Decision gyges(const Request& req, const ClusterView& view, int target) {
        const bool long_req = is_long(req);
        const bool long_pending = long_req || view.deferred_long_requests > 0 ||
                                  std::any_of(view.instances.begin(), view.instances.end(), [](const InstanceState& i) {
                                      return std::any_of(i.waiting_requests.begin(), i.waiting_requests.end(),
                                                         [](const ActiveRequest& r) { return r.long_request; });
                                  });
        const InstanceState* best = nullptr;
        std::tuple<int, double, int> best_key{};
        for (const auto& inst : view.instances) {
            if (inst.transforming || (!long_pending && inst.reserved_for_transform)) {
                continue;
            }
            const auto load = estimate_load(&req, inst);
            if (!load) {
                continue;
            }
            // Long requests go to the widest instance that fits, keeping merges rare.
            std::tuple<int, double, int> key{long_req ? -inst.tp : 0, *load, inst.id};
            if (!best || key < best_key) {
                best = &inst;
                best_key = key;
            }
        }
        if (best) {
            return {DecisionKind::Place, best->id, {}};
        }
        const long long need = kv_need(req);
        if (!long_req) {
            if (const auto* q = least_loaded_capable(view, need)) {
                return {DecisionKind::Queue, q->id, {}};
            }
            return {DecisionKind::Defer, -1, {}};
        }
        // An existing wide instance will free up; waiting beats another merge.
        if (const auto* q = least_loaded_capable(view, need)) {
            return {DecisionKind::Queue, q->id, {}};
        }
        if (merge_pending(view, target)) {
            return {DecisionKind::Defer, -1, {}};
        }
        return scale_up_or_wait(req, view, target, nullptr);
    }

    Decision round_robin(const Request& req, const ClusterView& view, int target) {
        std::vector<const InstanceState*> usable;
        for (const auto& i : view.instances) {
            if (!i.transforming) {
                usable.push_back(&i);
            }
        }
        if (usable.empty()) {
            return {DecisionKind::Defer, -1, {}};
        }
        // Next instance id after the last one served, wrapping around.
        const InstanceState* chosen = usable.front();
        for (const auto* i : usable) {
            if (i->id > rr_last_) {
                chosen = i;
                break;
            }
        }
        rr_last_ = chosen->id;
        return place_or_grow(req, view, target, chosen);
    }

    Decision least_load(const Request& req, const ClusterView& view, int target) {
        const InstanceState* chosen = nullptr;
        double best = 0.0;
        for (const auto& i : view.instances) {
            if (i.transforming) {
                continue;
            }
            const double l = current_load(i);
            if (!chosen || l < best) {
                chosen = &i;
                best = l;
            }
        }
        if (!chosen) {
            return {DecisionKind::Defer, -1, {}};
        }
        return place_or_grow(req, view, target, chosen);
    }

    Decision place_or_grow(const Request& req, const ClusterView& view, int target, const InstanceState* chosen) {
        if (estimate_load(&req, *chosen)) {
            return {DecisionKind::Place, chosen->id, {}};
        }
        if (chosen->kv_capacity_tokens >= kv_need(req)) {
            return {DecisionKind::Queue, chosen->id, {}};
        }
        return scale_up_or_wait(req, view, target, chosen);
    }

    SchedulerConfig config_;
    PerfModel perf_;
    int rr_last_ = -1;
    std::optional<double> last_long_;
};

}  // namespace tpshift::sched
