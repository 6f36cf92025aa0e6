// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <vector>

#include "tpshift/kv_layout.hpp"

namespace tpshift::testing {

struct Group {
    std::vector<kv::KvStore> stores;
    std::vector<PageSpace> spaces;
};

/**
 * `workers` TP1 workers; the first `populated` hold requests with random
 * lengths, the rest are empty.
 */
inline Group random_group(std::mt19937_64& rng, const kv::KvLayout& layout, int workers, int populated,
                          Bytes page_size, int max_requests = 4, int max_tokens = 80) {
    Group g;
    int next_request = 0;
    for (int w = 0; w < workers; ++w) {
        g.stores.emplace_back(layout, w);
        g.spaces.emplace_back(Bytes{1} << 24, page_size);
        if (w >= populated) {
            continue;
        }
        const int n = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_requests));
        for (int r = 0; r < n; ++r) {
            const int tokens = 1 + static_cast<int>(rng() % static_cast<unsigned>(max_tokens));
            kv::fill_request(g.stores.back(), g.spaces.back(), next_request++, tokens);
        }
    }
    return g;
}

/// Every worker holds the same number of equally long requests.
inline Group balanced_group(const kv::KvLayout& layout, int workers, int requests, int tokens, Bytes page_size,
                            Bytes capacity = Bytes{1} << 26) {
    Group g;
    for (int w = 0; w < workers; ++w) {
        g.stores.emplace_back(layout, w);
        g.spaces.emplace_back(capacity, page_size);
        for (int r = 0; r < requests; ++r) {
            kv::fill_request(g.stores.back(), g.spaces.back(), w * requests + r, tokens);
        }
    }
    return g;
}

}  // namespace tpshift::testing
