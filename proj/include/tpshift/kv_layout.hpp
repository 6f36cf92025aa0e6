// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "tpshift/error.hpp"
#include "tpshift/page_store.hpp"
#include "tpshift/units.hpp"

namespace tpshift::kv {

enum class Axis : std::uint8_t { Block, KV, Token, Header };

inline std::string to_string(Axis a) {
    switch (a) {
    case Axis::Block: return "Block";
    case Axis::KV: return "K/V";
    case Axis::Token: return "Token";
    case Axis::Header: return "Header";
    }
    return "?";
}

using AxisOrder = std::array<Axis, 4>;
using Permutation = std::array<int, 4>;

/**
 * Hierarchy of a KV cache buffer. The head_dim elements of one
 * (block, K/V, token, header) cell are always innermost and contiguous.
 */
struct KvLayout {
    AxisOrder axis_order{Axis::KV, Axis::Block, Axis::Token, Axis::Header};
    int tokens_per_block = 16;
    int num_headers = 8;
    int head_dim = 128;
    int element_bytes = 2;

    static KvLayout raw(int tokens_per_block, int heads, int head_dim, int element_bytes = 2) {
        return {{Axis::KV, Axis::Block, Axis::Token, Axis::Header}, tokens_per_block, heads, head_dim, element_bytes};
    }
    static KvLayout page_friendly(int tokens_per_block, int heads, int head_dim, int element_bytes = 2) {
        return {{Axis::Block, Axis::KV, Axis::Token, Axis::Header}, tokens_per_block, heads, head_dim, element_bytes};
    }
    static KvLayout header_centric(int tokens_per_block, int heads, int head_dim, int element_bytes = 2) {
        return {{Axis::Block, Axis::Header, Axis::KV, Axis::Token}, tokens_per_block, heads, head_dim, element_bytes};
    }

    Bytes cell_bytes() const { return static_cast<Bytes>(head_dim) * static_cast<Bytes>(element_bytes); }
    /// One header's K and V for every token slot of a block.
    Bytes header_segment_bytes() const { return 2 * static_cast<Bytes>(tokens_per_block) * cell_bytes(); }
    Bytes block_bytes() const { return header_segment_bytes() * static_cast<Bytes>(num_headers); }
    Bytes bytes_per_token() const { return 2 * static_cast<Bytes>(num_headers) * cell_bytes(); }

    bool is_permutation() const {
        auto sorted = axis_order;
        std::sort(sorted.begin(), sorted.end());
        return sorted == AxisOrder{Axis::Block, Axis::KV, Axis::Token, Axis::Header};
    }
    /// Blocks are self-contained, so appending a block never moves existing data.
    bool page_friendly_order() const { return axis_order[0] == Axis::Block; }
    /// A header's data for a whole block is one contiguous segment.
    bool header_centric_order() const {
        return axis_order == AxisOrder{Axis::Block, Axis::Header, Axis::KV, Axis::Token};
    }

    std::string describe() const {
        std::string s = "[";
        for (std::size_t i = 0; i < 4; ++i) {
            s += (i ? ", " : "") + to_string(axis_order[i]);
        }
        return s + "]";
    }
};

/**
 * The permutation p with expected.axis_order[i] == stored.axis_order[p[i]],
 * i.e. the argument to a permute() that presents the stored buffer in the
 * order a kernel expects.
 */
inline Permutation stride_order(const KvLayout& stored, const KvLayout& expected) {
    if (!stored.is_permutation() || !expected.is_permutation()) {
        throw Error(ErrorCode::IncompatibleLayouts, "axis order is not a permutation of {Block, K/V, Token, Header}");
    }
    if (stored.tokens_per_block != expected.tokens_per_block || stored.num_headers != expected.num_headers ||
        stored.head_dim != expected.head_dim || stored.element_bytes != expected.element_bytes) {
        throw Error(ErrorCode::IncompatibleLayouts, "layouts describe different block shapes");
    }
    Permutation p{};
    for (std::size_t i = 0; i < 4; ++i) {
        p[i] = static_cast<int>(std::find(stored.axis_order.begin(), stored.axis_order.end(), expected.axis_order[i]) -
                                stored.axis_order.begin());
    }
    return p;
}

/// Small dense 4-D tensor used to check layout mappings element by element.
struct Tensor4 {
    std::array<int, 4> dims{};
    std::vector<std::uint64_t> data;

    std::size_t offset(const std::array<int, 4>& idx) const {
        std::size_t off = 0;
        for (std::size_t d = 0; d < 4; ++d) {
            off = off * static_cast<std::size_t>(dims[d]) + static_cast<std::size_t>(idx[d]);
        }
        return off;
    }
    std::uint64_t at(const std::array<int, 4>& idx) const { return data[offset(idx)]; }
};

/// Equivalent of tensor.permute(p).contiguous().
inline Tensor4 permute(const Tensor4& in, const Permutation& p) {
    Tensor4 out;
    for (std::size_t i = 0; i < 4; ++i) {
        out.dims[i] = in.dims[p[i]];
    }
    out.data.resize(in.data.size());
    std::array<int, 4> idx{};
    for (idx[0] = 0; idx[0] < out.dims[0]; ++idx[0]) {
        for (idx[1] = 0; idx[1] < out.dims[1]; ++idx[1]) {
            for (idx[2] = 0; idx[2] < out.dims[2]; ++idx[2]) {
                for (idx[3] = 0; idx[3] < out.dims[3]; ++idx[3]) {
                    std::array<int, 4> src{};
                    for (std::size_t i = 0; i < 4; ++i) {
                        src[p[i]] = idx[i];
                    }
                    out.data[out.offset(idx)] = in.at(src);
                }
            }
        }
    }
    return out;
}

struct HeaderRange {
    int begin = 0;  ///< 0-based, inclusive
    int end = 0;    ///< exclusive

    int size() const { return end - begin; }
    bool empty() const { return end <= begin; }
    bool contains(int h) const { return h >= begin && h < end; }
    HeaderRange intersect(const HeaderRange& o) const { return {std::max(begin, o.begin), std::min(end, o.end)}; }
    bool operator==(const HeaderRange&) const = default;

    /// "H3-H4" in the 1-based naming used for attention heads.
    std::string label() const {
        return size() == 1 ? "H" + std::to_string(begin + 1)
                           : "H" + std::to_string(begin + 1) + "-H" + std::to_string(end);
    }
};

/**
 * Headers worker `worker` (1-based) keeps when `heads` heads are split over
 * `tp` workers: [(H/tp)(i-1)+1 .. (H/tp)(i-1)+H/tp] in 1-based numbering,
 * returned here as a 0-based half-open range.
 */
inline HeaderRange retained_headers(int worker, int heads, int tp) {
    if (tp < 1 || heads % tp != 0) {
        throw Error(ErrorCode::IndivisibleHeads,
                    std::to_string(heads) + " heads cannot be split over tp " + std::to_string(tp));
    }
    if (worker < 1 || worker > tp) {
        throw std::invalid_argument("worker index " + std::to_string(worker) + " outside 1.." + std::to_string(tp));
    }
    const int per = heads / tp;
    return {per * (worker - 1), per * (worker - 1) + per};
}

/// One KV block: a run of one request's tokens for a contiguous set of headers.
struct BlockRecord {
    int id = 0;
    int request = 0;
    int first_token = 0;
    int token_count = 0;
    HeaderRange headers;
    PageRange backing;
    Bytes backing_offset = 0;  ///< where the block's first byte sits inside `backing`
};

/// A symbolic KV element: one request token's K or V vector for one header.
struct Cell {
    int request = 0;
    int token = 0;
    int header = 0;
    int kv = 0;  ///< 0 = K, 1 = V
    auto operator<=>(const Cell&) const = default;
};

/// One worker's KV cache for one layer. Contents are tracked by block records, not bytes.
class KvStore {
public:
    KvStore() = default;
    KvStore(KvLayout layout, int worker, int layer = 0) : layout_(layout), worker_(worker), layer_(layer) {}

    const KvLayout& layout() const { return layout_; }
    int worker() const { return worker_; }
    int layer() const { return layer_; }
    const std::vector<BlockRecord>& blocks() const { return blocks_; }
    std::vector<BlockRecord>& blocks() { return blocks_; }

    /// Allocation size of a block holding `headers`.
    Bytes block_bytes(const HeaderRange& headers) const {
        return layout_.header_segment_bytes() * static_cast<Bytes>(headers.size());
    }

    std::string next_tag() { return "kv/w" + std::to_string(worker_) + "/l" + std::to_string(layer_) + "/b" + std::to_string(next_id_); }
    int take_id() { return next_id_++; }

    BlockRecord* find(int id) {
        auto it = std::find_if(blocks_.begin(), blocks_.end(), [&](const BlockRecord& b) { return b.id == id; });
        return it == blocks_.end() ? nullptr : &*it;
    }
    const BlockRecord* find(int id) const { return const_cast<KvStore*>(this)->find(id); }

    /// Tokens of `request` held here (for any header set).
    int token_count(int request) const {
        int n = 0;
        for (const auto& b : blocks_) {
            if (b.request == request) {
                n = std::max(n, b.first_token + b.token_count);
            }
        }
        return n;
    }

    std::vector<int> requests() const {
        std::vector<int> out;
        for (const auto& b : blocks_) {
            out.push_back(b.request);
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    Bytes allocated_bytes() const {
        Bytes total = 0;
        for (const auto& b : blocks_) {
            total += block_bytes(b.headers);
        }
        return total;
    }

    void add_cells(std::vector<Cell>& out) const {
        for (const auto& b : blocks_) {
            for (int t = b.first_token; t < b.first_token + b.token_count; ++t) {
                for (int h = b.headers.begin; h < b.headers.end; ++h) {
                    out.push_back({b.request, t, h, 0});
                    out.push_back({b.request, t, h, 1});
                }
            }
        }
    }

private:
    KvLayout layout_;
    int worker_ = 0;
    int layer_ = 0;
    std::vector<BlockRecord> blocks_;
    int next_id_ = 0;
};

/// Sorted multiset of every cell held by `stores`.
inline std::vector<Cell> cells_of(std::span<const KvStore> stores) {
    std::vector<Cell> out;
    for (const auto& s : stores) {
        s.add_cells(out);
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct AppendResult {
    std::size_t new_pages = 0;
    Bytes shift_bytes = 0;
};

/**
 * Appends `new_tokens` tokens of `request` as fresh blocks holding `headers`
 * (all heads by default).
 *
 * Under the raw [K/V, Block, Token, Header] order the whole V region sits
 * behind all K data, so growing K by one block slides every existing V
 * byte: half of each existing block. Block-major orders never move data.
 */
inline AppendResult append_block(KvStore& store, PageSpace& space, int request, int new_tokens,
                                 std::optional<HeaderRange> headers = std::nullopt) {
    if (new_tokens < 1) {
        throw std::invalid_argument("append_block needs at least one token");
    }
    const auto& layout = store.layout();
    const HeaderRange all = headers.value_or(HeaderRange{0, layout.num_headers});
    if (all.empty() || all.begin < 0 || all.end > layout.num_headers) {
        throw std::invalid_argument("header range outside the layout");
    }
    AppendResult result;
    int first = store.token_count(request);
    while (new_tokens > 0) {
        const int n = std::min(new_tokens, layout.tokens_per_block);
        if (!layout.page_friendly_order()) {
            for (const auto& b : store.blocks()) {
                result.shift_bytes += store.block_bytes(b.headers) / 2;
            }
        }
        const std::string tag = store.next_tag();
        PageRange range = space.alloc(store.block_bytes(all), tag, PageUse::Kv);
        result.new_pages += range.length;
        store.blocks().push_back(BlockRecord{store.take_id(), request, first, n, all, range, 0});
        first += n;
        new_tokens -= n;
    }
    return result;
}

inline AppendResult fill_request(KvStore& store, PageSpace& space, int request, int tokens,
                                 std::optional<HeaderRange> headers = std::nullopt) {
    return append_block(store, space, request, tokens, headers);
}

// ---------------------------------------------------------------------------
// Migration planning

struct Transfer {
    int src = 0;
    int dst = 0;
    Bytes bytes = 0;
    HeaderRange headers;
    int request = 0;
    int first_token = 0;
    int token_count = 0;
    int src_block = 0;
    PageRange dst_backing;  ///< pages the receiver maps, known at planning time
};

/// A source block after its outgoing headers leave: what stays and where.
struct Reshape {
    int worker = 0;
    int block = 0;
    HeaderRange keep;
    PageRange backing;  ///< length 0 when nothing stays
    Bytes backing_offset = 0;
};

struct Stage {
    std::vector<Transfer> transfers;
    std::vector<std::vector<PageRange>> freed_after;  ///< per worker; reusable from the next stage on
    std::vector<Reshape> reshapes;
};

struct TrimCopy {
    int worker = 0;
    int block = 0;
    HeaderRange keep;
    Bytes bytes = 0;
    PageRange compact_backing;
};

enum class MigrationKind { TrimBaseline, InPlace };

struct MigrationPlan {
    MigrationKind kind = MigrationKind::InPlace;
    int tp_from = 1;
    int tp_to = 1;
    std::vector<Stage> stages;
    std::vector<TrimCopy> trims;
    std::vector<Bytes> trim_copies;       ///< per worker
    std::vector<Bytes> peak_extra_bytes;  ///< per worker, above the mapped bytes before migration

    bool empty() const { return stages.empty() && trims.empty(); }

    Bytes total_trim_copies() const { return std::accumulate(trim_copies.begin(), trim_copies.end(), Bytes{0}); }

    Bytes total_moved_bytes() const {
        Bytes b = 0;
        for (const auto& s : stages) {
            for (const auto& t : s.transfers) {
                b += t.bytes;
            }
        }
        return b;
    }

    Bytes max_peak_extra_bytes() const {
        return peak_extra_bytes.empty() ? 0 : *std::max_element(peak_extra_bytes.begin(), peak_extra_bytes.end());
    }

    /// Largest per-worker send or receive volume; links are full duplex, so this bounds the all-to-all.
    Bytes busiest_worker_traffic() const {
        std::map<int, Bytes> sent;
        std::map<int, Bytes> received;
        for (const auto& s : stages) {
            for (const auto& t : s.transfers) {
                sent[t.src] += t.bytes;
                received[t.dst] += t.bytes;
            }
        }
        Bytes m = 0;
        for (const auto* side : {&sent, &received}) {
            for (const auto& [w, b] : *side) {
                m = std::max(m, b);
            }
        }
        return m;
    }

    /// Map and unmap batches: one of each per stage.
    int driver_calls() const { return 2 * static_cast<int>(stages.size()) + (trims.empty() ? 0 : 2); }
};

namespace detail {

struct Ownership {
    int workers = 0;
    int tp_to = 1;
    int heads = 0;
    std::map<int, int> target_instance;  ///< request -> target instance index

    int owner(int request, int header) const {
        const int inst = target_instance.at(request);
        const int per = heads / tp_to;
        return inst * tp_to + header / per;
    }
};

inline void check_group(std::span<const KvStore> stores, std::span<const PageSpace> spaces, int tp_from, int tp_to) {
    const int w = static_cast<int>(stores.size());
    if (w == 0 || stores.size() != spaces.size() || tp_from < 1 || tp_to < 1 || w % tp_from != 0 || w % tp_to != 0 ||
        (tp_to % tp_from != 0 && tp_from % tp_to != 0)) {
        throw Error(ErrorCode::IncompatibleGroup, std::to_string(w) + " workers cannot go from tp " +
                                                      std::to_string(tp_from) + " to tp " + std::to_string(tp_to));
    }
    const int heads = stores[0].layout().num_headers;
    if (heads % tp_to != 0 || heads % tp_from != 0) {
        throw Error(ErrorCode::IndivisibleHeads, std::to_string(heads) + " heads vs tp " + std::to_string(tp_to));
    }
}

/**
 * Where each request lives after the transformation. Merging keeps a
 * request inside the instance that absorbs its workers; splitting hands
 * requests to fragments largest-first, each to the currently lightest
 * fragment (lowest index on ties).
 */
inline Ownership ownership(std::span<const KvStore> stores, int tp_from, int tp_to) {
    Ownership own;
    own.workers = static_cast<int>(stores.size());
    own.tp_to = tp_to;
    own.heads = stores[0].layout().num_headers;
    std::map<int, int> source_instance;
    std::map<int, int> tokens;
    for (const auto& s : stores) {
        for (const auto& b : s.blocks()) {
            source_instance[b.request] = s.worker() / tp_from;
            tokens[b.request] = std::max(tokens[b.request], b.first_token + b.token_count);
        }
    }
    if (tp_to >= tp_from) {
        for (const auto& [req, inst] : source_instance) {
            own.target_instance[req] = inst * tp_from / tp_to;
        }
        return own;
    }
    const int fragments = tp_from / tp_to;
    std::map<int, std::vector<int>> by_instance;
    for (const auto& [req, inst] : source_instance) {
        by_instance[inst].push_back(req);
    }
    for (auto& [inst, reqs] : by_instance) {
        std::stable_sort(reqs.begin(), reqs.end(), [&](int a, int b) { return tokens[a] > tokens[b]; });
        std::vector<long long> load(fragments, 0);
        for (int r : reqs) {
            const int f = static_cast<int>(std::min_element(load.begin(), load.end()) - load.begin());
            load[f] += tokens[r];
            own.target_instance[r] = inst * fragments + f;
        }
    }
    return own;
}

struct Piece {
    int dst;
    HeaderRange headers;
};

/// Splits a block's header range by destination worker, in header order.
inline std::vector<Piece> pieces_of(const BlockRecord& b, const Ownership& own) {
    std::vector<Piece> out;
    for (int h = b.headers.begin; h < b.headers.end; ++h) {
        const int dst = own.owner(b.request, h);
        if (!out.empty() && out.back().dst == dst && out.back().headers.end == h) {
            ++out.back().headers.end;
        } else {
            out.push_back({dst, {h, h + 1}});
        }
    }
    return out;
}

inline Stage empty_stage(std::size_t workers) {
    Stage s;
    s.freed_after.resize(workers);
    return s;
}

/// Maps the receive blocks of one stage; returns them in transfer order.
inline void map_receives(Stage& stage, std::vector<KvStore>& stores, std::vector<PageSpace>& spaces, bool planning,
                         MigrationKind kind) {
    for (auto& t : stage.transfers) {
        KvStore& dst = stores[t.dst];
        const std::string tag = dst.next_tag();
        PageRange r;
        try {
            r = spaces[t.dst].alloc(dst.block_bytes(t.headers), tag, PageUse::Kv);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::OutOfMemory && kind == MigrationKind::InPlace) {
                throw Error(ErrorCode::InsufficientStageBuffer,
                            "worker " + std::to_string(t.dst) + " cannot map its stage receive buffer: " + e.what());
            }
            throw;
        }
        if (planning) {
            t.dst_backing = r;
        } else if (!(r == t.dst_backing)) {
            throw std::logic_error("migration plan does not match the stores it is applied to");
        }
        dst.blocks().push_back(
            BlockRecord{dst.take_id(), t.request, t.first_token, t.token_count, t.headers, r, 0});
    }
}

inline void apply_reshapes(const Stage& stage, std::vector<KvStore>& stores, std::vector<PageSpace>& spaces) {
    for (std::size_t w = 0; w < stage.freed_after.size(); ++w) {
        for (const auto& r : stage.freed_after[w]) {
            spaces[w].unmap(r);
        }
    }
    for (const auto& rs : stage.reshapes) {
        auto& blocks = stores[rs.worker].blocks();
        auto it = std::find_if(blocks.begin(), blocks.end(), [&](const BlockRecord& b) { return b.id == rs.block; });
        if (it == blocks.end()) {
            throw std::logic_error("migration plan refers to a block that does not exist");
        }
        if (rs.keep.empty()) {
            blocks.erase(it);
        } else {
            it->headers = rs.keep;
            it->backing = rs.backing;
            it->backing_offset = rs.backing_offset;
        }
    }
}

inline void apply_trims(const std::vector<TrimCopy>& trims, std::vector<KvStore>& stores,
                        std::vector<PageSpace>& spaces, bool planning, std::vector<TrimCopy>* recorded,
                        const std::function<void()>& checkpoint) {
    for (auto t : trims) {
        KvStore& store = stores[t.worker];
        BlockRecord* b = store.find(t.block);
        if (b == nullptr) {
            throw std::logic_error("trim refers to a block that does not exist");
        }
        PageRange r = spaces[t.worker].alloc(store.block_bytes(t.keep), store.next_tag(), PageUse::Kv);
        if (planning) {
            t.compact_backing = r;
            recorded->push_back(t);
        } else if (!(r == t.compact_backing)) {
            throw std::logic_error("migration plan does not match the stores it is applied to");
        }
        checkpoint();
        const PageRange old = b->backing;
        store.take_id();
        b->headers = t.keep;
        b->backing = r;
        b->backing_offset = 0;
        spaces[t.worker].unmap(old);
    }
}

}  // namespace detail

/**
 * Migrate-and-trim: one all-to-all that ships every non-retained header into
 * freshly mapped receive blocks, then compacts each partially retained local
 * block (copy the kept headers out, drop the old block). Under a token-first
 * layout the kept headers are interleaved per token, so nothing can be
 * released before the compaction.
 */
inline MigrationPlan plan_migration_trim(std::span<const KvStore> stores, std::span<const PageSpace> spaces, int tp_from,
                                         int tp_to) {
    detail::check_group(stores, spaces, tp_from, tp_to);
    MigrationPlan plan;
    plan.kind = MigrationKind::TrimBaseline;
    plan.tp_from = tp_from;
    plan.tp_to = tp_to;
    const std::size_t n = stores.size();
    plan.trim_copies.assign(n, 0);
    plan.peak_extra_bytes.assign(n, 0);
    if (tp_from == tp_to) {
        return plan;
    }
    std::vector<KvStore> st(stores.begin(), stores.end());
    std::vector<PageSpace> sp(spaces.begin(), spaces.end());
    std::vector<Bytes> base(n);
    for (std::size_t w = 0; w < n; ++w) {
        base[w] = sp[w].mapped_bytes();
    }
    auto checkpoint = [&] {
        for (std::size_t w = 0; w < n; ++w) {
            if (sp[w].mapped_bytes() > base[w]) {
                plan.peak_extra_bytes[w] = std::max(plan.peak_extra_bytes[w], sp[w].mapped_bytes() - base[w]);
            }
        }
    };

    const auto own = detail::ownership(stores, tp_from, tp_to);
    Stage stage = detail::empty_stage(n);
    std::vector<TrimCopy> trims;
    for (std::size_t w = 0; w < n; ++w) {
        for (const auto& b : st[w].blocks()) {
            HeaderRange keep{0, 0};
            bool moved = false;
            for (const auto& pc : detail::pieces_of(b, own)) {
                if (pc.dst == static_cast<int>(w)) {
                    keep = pc.headers;
                    continue;
                }
                moved = true;
                stage.transfers.push_back(Transfer{static_cast<int>(w), pc.dst, st[w].block_bytes(pc.headers),
                                                   pc.headers, b.request, b.first_token, b.token_count, b.id, {}});
            }
            if (!moved) {
                continue;
            }
            if (keep.empty()) {
                stage.freed_after[w].push_back(b.backing);
                stage.reshapes.push_back(Reshape{static_cast<int>(w), b.id, keep, {}, 0});
            } else {
                trims.push_back(TrimCopy{static_cast<int>(w), b.id, keep, st[w].block_bytes(keep), {}});
                plan.trim_copies[w] += st[w].block_bytes(keep);
            }
        }
    }
    std::stable_sort(stage.transfers.begin(), stage.transfers.end(),
                     [](const Transfer& a, const Transfer& b) { return std::tie(a.src, a.dst) < std::tie(b.src, b.dst); });
    detail::map_receives(stage, st, sp, true, plan.kind);
    checkpoint();
    detail::apply_reshapes(stage, st, sp);
    plan.stages.push_back(std::move(stage));
    detail::apply_trims(trims, st, sp, true, &plan.trims, checkpoint);
    return plan;
}

/**
 * Phased in-place migration over a header-centric store. Each worker's
 * moving blocks are split into `stage_count` consecutive chunks; stage k
 * ships chunk k of every worker. Receivers map their stage-k buffers, then
 * senders release the departed header segments, which become allocatable
 * from stage k+1 on. Kept segments stay where they are.
 */
inline MigrationPlan plan_migration_inplace(std::span<const KvStore> stores, std::span<const PageSpace> spaces,
                                            int tp_from, int tp_to, int stage_count) {
    detail::check_group(stores, spaces, tp_from, tp_to);
    if (stage_count < 1) {
        throw std::invalid_argument("stage_count must be >= 1");
    }
    for (const auto& s : stores) {
        if (!s.layout().header_centric_order()) {
            throw Error(ErrorCode::IncompatibleLayouts,
                        "in-place migration needs a header-centric store, got " + s.layout().describe());
        }
    }
    MigrationPlan plan;
    plan.kind = MigrationKind::InPlace;
    plan.tp_from = tp_from;
    plan.tp_to = tp_to;
    const std::size_t n = stores.size();
    plan.trim_copies.assign(n, 0);
    plan.peak_extra_bytes.assign(n, 0);
    if (tp_from == tp_to) {
        return plan;
    }
    const auto own = detail::ownership(stores, tp_from, tp_to);
    std::vector<KvStore> st(stores.begin(), stores.end());
    std::vector<PageSpace> sp(spaces.begin(), spaces.end());
    std::vector<Bytes> base(n);
    for (std::size_t w = 0; w < n; ++w) {
        base[w] = sp[w].mapped_bytes();
    }

    // Moving block ids per worker, in store order.
    std::vector<std::vector<int>> moving(n);
    for (std::size_t w = 0; w < n; ++w) {
        for (const auto& b : st[w].blocks()) {
            const auto pcs = detail::pieces_of(b, own);
            if (pcs.size() > 1 || pcs.front().dst != static_cast<int>(w)) {
                moving[w].push_back(b.id);
            }
        }
    }

    for (int k = 0; k < stage_count; ++k) {
        Stage stage = detail::empty_stage(n);
        for (std::size_t w = 0; w < n; ++w) {
            const std::size_t m = moving[w].size();
            const std::size_t lo = m * static_cast<std::size_t>(k) / static_cast<std::size_t>(stage_count);
            const std::size_t hi = m * static_cast<std::size_t>(k + 1) / static_cast<std::size_t>(stage_count);
            for (std::size_t i = lo; i < hi; ++i) {
                const BlockRecord& b = *st[w].find(moving[w][i]);
                const Bytes seg = st[w].layout().header_segment_bytes();
                const Bytes ps = sp[w].page_size();
                HeaderRange keep{0, 0};
                for (const auto& pc : detail::pieces_of(b, own)) {
                    if (pc.dst == static_cast<int>(w)) {
                        keep = pc.headers;
                        continue;
                    }
                    stage.transfers.push_back(Transfer{static_cast<int>(w), pc.dst, st[w].block_bytes(pc.headers),
                                                       pc.headers, b.request, b.first_token, b.token_count, b.id, {}});
                }
                Reshape rs{static_cast<int>(w), b.id, keep, {}, 0};
                if (keep.empty()) {
                    stage.freed_after[w].push_back(b.backing);
                } else {
                    // Kept segment is one byte interval; release every page it does not touch.
                    const Bytes lo_byte = b.backing_offset + static_cast<Bytes>(keep.begin - b.headers.begin) * seg;
                    const Bytes hi_byte = lo_byte + static_cast<Bytes>(keep.size()) * seg;
                    const std::size_t first_page = lo_byte / ps;
                    const std::size_t last_page = ceil_div(hi_byte, ps);
                    if (first_page > 0) {
                        stage.freed_after[w].push_back(b.backing.subrange(0, first_page));
                    }
                    if (last_page < b.backing.length) {
                        stage.freed_after[w].push_back(b.backing.subrange(last_page, b.backing.length - last_page));
                    }
                    rs.backing = b.backing.subrange(first_page, last_page - first_page);
                    rs.backing_offset = lo_byte - first_page * ps;
                }
                stage.reshapes.push_back(rs);
            }
        }
        if (stage.transfers.empty() && stage.reshapes.empty()) {
            continue;
        }
        std::stable_sort(stage.transfers.begin(), stage.transfers.end(), [](const Transfer& a, const Transfer& b) {
            return std::tie(a.src, a.dst) < std::tie(b.src, b.dst);
        });
        detail::map_receives(stage, st, sp, true, plan.kind);
        for (std::size_t w = 0; w < n; ++w) {
            if (sp[w].mapped_bytes() > base[w]) {
                plan.peak_extra_bytes[w] = std::max(plan.peak_extra_bytes[w], sp[w].mapped_bytes() - base[w]);
            }
        }
        detail::apply_reshapes(stage, st, sp);
        plan.stages.push_back(std::move(stage));
    }
    return plan;
}

/// Default phase count when the caller does not pick one.
inline int default_stage_count(int tp_to) { return tp_to * 2; }

/// Executes `plan` on the stores it was made for.
inline void apply_migration(const MigrationPlan& plan, std::vector<KvStore>& stores, std::vector<PageSpace>& spaces) {
    if (plan.empty()) {
        return;
    }
    for (Stage stage : plan.stages) {
        detail::map_receives(stage, stores, spaces, false, plan.kind);
        detail::apply_reshapes(stage, stores, spaces);
    }
    detail::apply_trims(plan.trims, stores, spaces, false, nullptr, [] {});
}

/// Structured text form used by golden tests and the CLI.
inline std::string to_text(const MigrationPlan& plan) {
    std::ostringstream os;
    os << "migration_plan kind " << (plan.kind == MigrationKind::InPlace ? "in_place" : "trim") << " tp "
       << plan.tp_from << "->" << plan.tp_to << " stages " << plan.stages.size() << '\n';
    for (std::size_t s = 0; s < plan.stages.size(); ++s) {
        const auto& st = plan.stages[s];
        os << "stage " << s << '\n';
        for (const auto& t : st.transfers) {
            os << "  transfer w" << t.src << "->w" << t.dst << " bytes " << t.bytes << " headers " << t.headers.label()
               << " req " << t.request << " tokens " << t.first_token << "+" << t.token_count << " dst_pages "
               << t.dst_backing.start_page << "+" << t.dst_backing.length << '\n';
        }
        for (std::size_t w = 0; w < st.freed_after.size(); ++w) {
            for (const auto& r : st.freed_after[w]) {
                os << "  freed w" << w << " pages " << r.start_page << "+" << r.length << " " << r.owner_tag << '\n';
            }
        }
    }
    for (const auto& t : plan.trims) {
        os << "trim w" << t.worker << " block " << t.block << " keep " << t.keep.label() << " bytes " << t.bytes
           << " compact_pages " << t.compact_backing.start_page << "+" << t.compact_backing.length << '\n';
    }
    for (std::size_t w = 0; w < plan.peak_extra_bytes.size(); ++w) {
        os << "worker " << w << " trim_copies " << plan.trim_copies[w] << " peak_extra_bytes "
           << plan.peak_extra_bytes[w] << '\n';
    }
    return os.str();
}

}  // namespace tpshift::kv
