// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/rational.hpp>

#include "tpshift/error.hpp"
#include "tpshift/model_config.hpp"
#include "tpshift/units.hpp"

namespace tpshift::weights {

using Rational = boost::rational<std::int64_t>;

enum class TensorRole { UpProj, GateProj, GateUpProj, DownProj };

inline std::string to_string(TensorRole role) {
    switch (role) {
    case TensorRole::UpProj: return "up_proj";
    case TensorRole::GateProj: return "gate_proj";
    case TensorRole::GateUpProj: return "gate_up_proj";
    case TensorRole::DownProj: return "down_proj";
    }
    return "?";
}

/// One MLP weight tensor. TP shards it along the intermediate dimension.
struct TensorSpec {
    std::string name;
    int hidden_size = 0;
    int inter_size = 0;
    int num_experts = 1;
    int element_bytes = 2;
    TensorRole role = TensorRole::UpProj;

    /// Fused gate+up stores both projections back to back.
    int sharded_dim() const { return role == TensorRole::GateUpProj ? 2 * inter_size : inter_size; }

    Bytes bytes() const {
        return static_cast<Bytes>(hidden_size) * static_cast<Bytes>(sharded_dim()) * static_cast<Bytes>(num_experts) *
               static_cast<Bytes>(element_bytes);
    }
};

/// The MLP tensors of one transformer layer.
inline std::vector<TensorSpec> mlp_tensors(const ModelConfig& model) {
    auto spec = [&](std::string suffix, TensorRole role) {
        return TensorSpec{model.name + "." + suffix, model.hidden_size, model.inter_size, model.num_experts,
                          model.element_bytes, role};
    };
    if (model.fused_gate_up) {
        return {spec("gate_up_proj", TensorRole::GateUpProj), spec("down_proj", TensorRole::DownProj)};
    }
    return {spec("gate_proj", TensorRole::GateProj), spec("up_proj", TensorRole::UpProj),
            spec("down_proj", TensorRole::DownProj)};
}

inline Bytes mlp_bytes_per_layer(const ModelConfig& model) {
    Bytes total = 0;
    for (const auto& t : mlp_tensors(model)) {
        total += t.bytes();
    }
    return total;
}

/// Everything that is not an MLP tensor (attention, embeddings, norms). Kept replicated on every worker.
inline Bytes non_mlp_bytes(const ModelConfig& model) {
    const Bytes mlp = mlp_bytes_per_layer(model) * static_cast<Bytes>(model.num_layers);
    const Bytes total = model.weights_bytes();
    return total > mlp ? total - mlp : 0;
}

inline void require_divisible(const TensorSpec& spec, int tp) {
    if (tp < 1 || spec.inter_size % tp != 0) {
        throw std::invalid_argument("tp " + std::to_string(tp) + " does not divide inter_size " +
                                    std::to_string(spec.inter_size) + " of " + spec.name);
    }
}

/// Pages one TP shard of `spec` spans, as an exact fraction. Integral iff the shard is page-aligned.
inline Rational pages_per_tensor(const TensorSpec& spec, int tp, Bytes page_size = kDefaultPageSize) {
    require_divisible(spec, tp);
    return Rational(static_cast<std::int64_t>(spec.bytes()), static_cast<std::int64_t>(page_size) * tp);
}

inline bool is_aligned(const TensorSpec& spec, int tp, Bytes page_size = kDefaultPageSize) {
    return pages_per_tensor(spec, tp, page_size).denominator() == 1;
}

/// Decimal rendering of an exact page count ("33.75", "63.28125"); exact whenever the denominator is 2^k * 5^m.
inline std::string to_decimal(const Rational& r) {
    std::int64_t whole = r.numerator() / r.denominator();
    std::int64_t rem = r.numerator() % r.denominator();
    std::string out = std::to_string(whole);
    if (rem == 0) {
        return out;
    }
    out += '.';
    for (int digits = 0; rem != 0 && digits < 18; ++digits) {
        rem *= 10;
        out += static_cast<char>('0' + rem / r.denominator());
        rem %= r.denominator();
    }
    return out;
}

inline int lcm_of(const std::vector<int>& values) {
    int l = 1;
    for (int v : values) {
        l = std::lcm(l, v);
    }
    return l;
}

/**
 * Zero padding appended to future shard boundaries so every shard, for
 * every TP degree in `tp_set`, starts and ends on a page boundary.
 *
 * The tensor is cut into `grid = lcm(tp_set)` equal pieces; piece j is
 * followed by `pad_bytes_at[j]` bytes of padding.
 */
struct PaddingPlan {
    TensorSpec tensor;
    std::vector<int> tp_set;
    Bytes page_size = kDefaultPageSize;
    int grid = 1;
    Bytes piece_bytes = 0;
    std::vector<Bytes> pad_bytes_at;
    Bytes total_pad_bytes = 0;
    Rational overhead{0};

    double overhead_fraction() const { return boost::rational_cast<double>(overhead); }
    Bytes padded_bytes() const { return tensor.bytes() + total_pad_bytes; }

    /// Byte offset of shard `index` (0-based) at degree `tp` within the padded tensor.
    Bytes shard_offset(int tp, int index) const {
        const int pieces = grid / tp;
        Bytes off = 0;
        for (int j = 0; j < index * pieces; ++j) {
            off += piece_bytes + pad_bytes_at[j];
        }
        return off;
    }

    /// Padded length of shard `index` at degree `tp`, padding included.
    Bytes shard_length(int tp, int index) const { return shard_offset(tp, index + 1) - shard_offset(tp, index); }
};

inline PaddingPlan make_padding_plan(const TensorSpec& spec, std::vector<int> tp_set,
                                     Bytes page_size = kDefaultPageSize) {
    if (tp_set.empty()) {
        throw std::invalid_argument("empty tp_set");
    }
    std::sort(tp_set.begin(), tp_set.end());
    tp_set.erase(std::unique(tp_set.begin(), tp_set.end()), tp_set.end());
    PaddingPlan plan;
    plan.tensor = spec;
    plan.tp_set = tp_set;
    plan.page_size = page_size;
    plan.grid = lcm_of(tp_set);
    require_divisible(spec, plan.grid);
    plan.piece_bytes = spec.bytes() / static_cast<Bytes>(plan.grid);
    plan.pad_bytes_at.assign(plan.grid, 0);

    // Boundary after piece j is a shard edge for degree tp iff (j+1) is a multiple of grid/tp.
    auto constrained = [&](int boundary) {
        return std::any_of(tp_set.begin(), tp_set.end(), [&](int tp) { return boundary % (plan.grid / tp) == 0; });
    };
    Bytes offset = 0;
    for (int j = 0; j < plan.grid; ++j) {
        offset += plan.piece_bytes;
        if (constrained(j + 1)) {
            plan.pad_bytes_at[j] = round_up(offset, page_size) - offset;
            offset += plan.pad_bytes_at[j];
        }
    }
    plan.total_pad_bytes = offset - spec.bytes();
    plan.overhead = Rational(static_cast<std::int64_t>(plan.total_pad_bytes), static_cast<std::int64_t>(spec.bytes()));
    return plan;
}

/// Padded tensor view: the shard footprint after padding, as an exact page count.
inline Rational padded_pages_per_shard(const PaddingPlan& plan, int tp, int index = 0) {
    return Rational(static_cast<std::int64_t>(plan.shard_length(tp, index)), static_cast<std::int64_t>(plan.page_size));
}

struct ModelPaddingSummary {
    Bytes pad_bytes_per_layer = 0;
    Bytes total_pad_bytes = 0;
    double overhead_fraction = 0.0;  ///< total padding over total model weights
};

inline ModelPaddingSummary model_padding_overhead(const ModelConfig& model, const std::vector<int>& tp_set,
                                                  Bytes page_size = kDefaultPageSize) {
    ModelPaddingSummary s;
    for (const auto& t : mlp_tensors(model)) {
        s.pad_bytes_per_layer += make_padding_plan(t, tp_set, page_size).total_pad_bytes;
    }
    s.total_pad_bytes = s.pad_bytes_per_layer * static_cast<Bytes>(model.num_layers);
    s.overhead_fraction = static_cast<double>(s.total_pad_bytes) / static_cast<double>(model.weights_bytes());
    return s;
}

inline std::string to_text(const PaddingPlan& plan) {
    std::ostringstream os;
    os << "padding_plan " << plan.tensor.name << '\n';
    os << "  role " << to_string(plan.tensor.role) << " bytes " << plan.tensor.bytes() << " page_size "
       << plan.page_size << '\n';
    os << "  tp_set";
    for (int tp : plan.tp_set) {
        os << ' ' << tp;
    }
    os << "\n  grid " << plan.grid << " piece_bytes " << plan.piece_bytes << '\n';
    for (int j = 0; j < plan.grid; ++j) {
        os << "  pad_after_piece " << j << ' ' << plan.pad_bytes_at[j] << '\n';
    }
    os << "  total_pad_bytes " << plan.total_pad_bytes << " overhead " << plan.overhead.numerator() << '/'
       << plan.overhead.denominator() << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Weight transformation plans

enum class WeightPlanKind { InPlace, PartialSwap, WholeCopy, Receive };

inline std::string to_string(WeightPlanKind k) {
    switch (k) {
    case WeightPlanKind::InPlace: return "in_place";
    case WeightPlanKind::PartialSwap: return "partial_swap";
    case WeightPlanKind::WholeCopy: return "whole_copy";
    case WeightPlanKind::Receive: return "receive";
    }
    return "?";
}

/// What one worker does to one tensor: pages to map, bytes to copy, pages to release.
struct TensorMove {
    std::string tensor;
    int worker = 0;           ///< 0-based position in the group
    Bytes copied_bytes = 0;   ///< intra-GPU relocation or inbound transfer
    std::size_t alloc_pages = 0;
    std::size_t freed_pages = 0;
    Bytes kept_offset = 0;    ///< byte offset of the kept shard in the resident buffer
    Bytes kept_length = 0;
};

/**
 * One layer's MLP weight transformation across the group.
 * copied_bytes and freed_pages are summed over workers; extra_peak_bytes is
 * the largest transient allocation any one worker makes before releasing.
 */
struct WeightTransformPlan {
    WeightPlanKind kind = WeightPlanKind::InPlace;
    int layer = 0;
    Bytes copied_bytes = 0;
    std::size_t freed_pages = 0;
    Bytes extra_peak_bytes = 0;
    std::vector<TensorMove> moves;

    Bytes worker_copied_bytes(int worker) const {
        Bytes b = 0;
        for (const auto& m : moves) {
            if (m.worker == worker) {
                b += m.copied_bytes;
            }
        }
        return b;
    }
};

/// Resident bytes of one shard of `t` at degree `tp`, padded when `padding` is given.
inline Bytes resident_shard_bytes(const TensorSpec& t, int tp, const PaddingPlan* padding, int index = 0) {
    return padding ? padding->shard_length(tp, index) : t.bytes() / static_cast<Bytes>(tp);
}

inline void require_group(int tp_from, int tp_to) {
    if (tp_from < 1 || tp_to < 1 || (tp_to % tp_from != 0 && tp_from % tp_to != 0)) {
        throw Error(ErrorCode::IncompatibleGroup,
                    "tp " + std::to_string(tp_from) + " -> " + std::to_string(tp_to) + " is not a merge or split");
    }
}

inline std::vector<WeightTransformPlan> plan_weight_scale_up(const ModelConfig& model, int tp_from, int tp_to,
                                                             bool padded, Bytes page_size = kDefaultPageSize,
                                                             std::optional<WeightPlanKind> kind = std::nullopt) {
    if (tp_to <= tp_from) {
        throw std::invalid_argument("scale-up needs tp_to > tp_from");
    }
    require_group(tp_from, tp_to);
    const auto tensors = mlp_tensors(model);
    std::vector<int> tp_set = model.supported_tp;
    tp_set.push_back(tp_from);
    tp_set.push_back(tp_to);

    std::vector<PaddingPlan> pads;
    bool misaligned = false;
    for (const auto& t : tensors) {
        pads.push_back(make_padding_plan(t, tp_set, page_size));
        misaligned = misaligned || !is_aligned(t, tp_to, page_size) || !is_aligned(t, tp_from, page_size);
    }
    const bool can_in_place = padded || !misaligned;
    WeightPlanKind chosen = kind.value_or(can_in_place ? WeightPlanKind::InPlace : WeightPlanKind::PartialSwap);
    if (chosen == WeightPlanKind::InPlace && !can_in_place) {
        throw Error(ErrorCode::MisalignedWithoutPadding,
                    model.name + ": tp " + std::to_string(tp_to) + " shards are not page-aligned");
    }

    const int split = tp_to / tp_from;
    WeightTransformPlan layer_plan;
    layer_plan.kind = chosen;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        const auto& t = tensors[ti];
        const PaddingPlan* pad = padded ? &pads[ti] : nullptr;
        for (int w = 0; w < tp_to; ++w) {
            const int src_shard = w / split;
            const Bytes resident = resident_shard_bytes(t, tp_from, pad, src_shard);
            const std::size_t resident_pages = ceil_div(resident, page_size);
            const Bytes base = pad ? pad->shard_offset(tp_from, src_shard) : t.bytes() / tp_from * src_shard;
            const Bytes a = (pad ? pad->shard_offset(tp_to, w) : t.bytes() / tp_to * w) - base;
            const Bytes len = resident_shard_bytes(t, tp_to, pad, w);
            const Bytes b = a + len;
            TensorMove mv{t.name, w, 0, 0, 0, a, len};
            if (chosen == WeightPlanKind::InPlace || chosen == WeightPlanKind::PartialSwap) {
                const Bytes first_full = round_up(a, page_size);
                const Bytes last_full = b / page_size * page_size;
                Bytes interior = last_full > first_full ? last_full - first_full : 0;
                Bytes remainder = len - interior;
                if (chosen == WeightPlanKind::InPlace) {
                    mv.freed_pages = resident_pages - ceil_div(len, page_size);
                } else {
                    mv.copied_bytes = remainder;
                    mv.alloc_pages = ceil_div(remainder, page_size);
                    mv.freed_pages = resident_pages - interior / page_size;
                }
            } else {
                mv.copied_bytes = len;
                mv.alloc_pages = ceil_div(len, page_size);
                mv.freed_pages = resident_pages;
            }
            layer_plan.moves.push_back(mv);
        }
    }
    for (const auto& mv : layer_plan.moves) {
        layer_plan.copied_bytes += mv.copied_bytes;
        layer_plan.freed_pages += mv.freed_pages;
    }
    for (int w = 0; w < tp_to; ++w) {
        std::size_t pages = 0;
        for (const auto& mv : layer_plan.moves) {
            if (mv.worker == w) {
                pages += mv.alloc_pages;
            }
        }
        layer_plan.extra_peak_bytes = std::max<Bytes>(layer_plan.extra_peak_bytes, pages * page_size);
    }

    std::vector<WeightTransformPlan> plans(static_cast<std::size_t>(model.num_layers), layer_plan);
    for (int l = 0; l < model.num_layers; ++l) {
        plans[l].layer = l;
    }
    return plans;
}

/**
 * The whole-model baseline: each worker maps one fresh block of
 * weights / tp_to bytes, copies its segments in, then drops the original.
 */
inline WeightTransformPlan plan_weight_scale_up_naive(const ModelConfig& model, int tp_from, int tp_to) {
    if (tp_to <= tp_from) {
        throw std::invalid_argument("scale-up needs tp_to > tp_from");
    }
    require_group(tp_from, tp_to);
    const Bytes target = model.weights_bytes() / static_cast<Bytes>(tp_to);
    WeightTransformPlan p;
    p.kind = WeightPlanKind::WholeCopy;
    p.layer = -1;
    p.copied_bytes = target * static_cast<Bytes>(tp_to);
    p.extra_peak_bytes = target;
    p.freed_pages = 0;
    return p;
}

/**
 * Split: every worker keeps its current shard and receives the rest of its
 * new, wider shard from its peers (all-to-all).
 */
inline std::vector<WeightTransformPlan> plan_weight_scale_down(const ModelConfig& model, int tp_from, int tp_to,
                                                               bool padded, Bytes page_size = kDefaultPageSize) {
    if (tp_to == tp_from) {
        return {};
    }
    if (tp_to > tp_from) {
        throw std::invalid_argument("scale-down needs tp_to < tp_from");
    }
    require_group(tp_from, tp_to);
    const auto tensors = mlp_tensors(model);
    std::vector<int> tp_set = model.supported_tp;
    tp_set.push_back(tp_from);
    tp_set.push_back(tp_to);

    const int merge = tp_from / tp_to;
    WeightTransformPlan layer_plan;
    layer_plan.kind = WeightPlanKind::Receive;
    for (const auto& t : tensors) {
        const PaddingPlan pad = make_padding_plan(t, tp_set, page_size);
        const PaddingPlan* pp = padded ? &pad : nullptr;
        const bool aligned = padded || (is_aligned(t, tp_from, page_size) && is_aligned(t, tp_to, page_size));
        for (int w = 0; w < tp_from; ++w) {
            const int dst_shard = w / merge;
            const Bytes have = resident_shard_bytes(t, tp_from, pp, w);
            const Bytes want = resident_shard_bytes(t, tp_to, pp, dst_shard);
            TensorMove mv{t.name, w, 0, 0, 0, 0, want};
            if (aligned) {
                mv.copied_bytes = want - have;
                mv.alloc_pages = ceil_div(want, page_size) - ceil_div(have, page_size);
            } else {
                // An unaligned shard cannot be grown in place; rebuild the whole buffer.
                mv.copied_bytes = want;
                mv.alloc_pages = ceil_div(want, page_size);
                mv.freed_pages = ceil_div(have, page_size);
            }
            layer_plan.moves.push_back(mv);
        }
    }
    for (const auto& mv : layer_plan.moves) {
        layer_plan.copied_bytes += mv.copied_bytes;
        layer_plan.freed_pages += mv.freed_pages;
    }
    for (int w = 0; w < tp_from; ++w) {
        std::size_t pages = 0;
        for (const auto& mv : layer_plan.moves) {
            if (mv.worker == w) {
                pages += mv.alloc_pages;
            }
        }
        layer_plan.extra_peak_bytes = std::max<Bytes>(layer_plan.extra_peak_bytes, pages * page_size);
    }
    std::vector<WeightTransformPlan> plans(static_cast<std::size_t>(model.num_layers), layer_plan);
    for (int l = 0; l < model.num_layers; ++l) {
        plans[l].layer = l;
    }
    return plans;
}

}  // namespace tpshift::weights
