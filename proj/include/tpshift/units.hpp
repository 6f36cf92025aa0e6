// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace tpshift {

using Bytes = std::uint64_t;

// Page math is binary; model and GPU sizes quoted in GB are decimal.
inline constexpr Bytes KiB = 1024;
inline constexpr Bytes MiB = 1024 * KiB;
inline constexpr Bytes GiB = 1024 * MiB;
inline constexpr Bytes GB = 1'000'000'000;

inline constexpr Bytes kDefaultPageSize = 2 * MiB;

constexpr Bytes ceil_div(Bytes a, Bytes b) { return (a + b - 1) / b; }

constexpr Bytes round_up(Bytes a, Bytes b) { return ceil_div(a, b) * b; }

/// Decimal gigabytes (as written in model cards) to bytes, rounded to nearest.
constexpr Bytes gb_to_bytes(double gb) { return static_cast<Bytes>(gb * 1e9 + 0.5); }

}  // namespace tpshift
