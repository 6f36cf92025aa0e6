// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "tpshift/ffn_check.hpp"

namespace tpshift::ffn {
namespace {

DenseMatrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    DenseMatrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            m(i, j) = u(rng);
        }
    }
    return m;
}

// Triple-loop reference with explicit sums, no shared helpers.
DenseMatrix reference_ffn(const DenseMatrix& x, const DenseMatrix& u, const DenseMatrix& d, const Activation& f) {
    DenseMatrix out(x.rows(), d.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::vector<double> hidden(u.cols());
        for (std::size_t j = 0; j < u.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < x.cols(); ++k) {
                s += x(i, k) * u(k, j);
            }
            hidden[j] = f(s);
        }
        for (std::size_t c = 0; c < d.cols(); ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < u.cols(); ++j) {
                s += hidden[j] * d(j, c);
            }
            out(i, c) = s;
        }
    }
    return out;
}

TEST(Ffn, MatchesReference) {
    std::mt19937_64 rng(1);
    const auto x = random_matrix(rng, 3, 5);
    const auto u = random_matrix(rng, 5, 8);
    const auto d = random_matrix(rng, 8, 4);
    for (auto k : {ActivationKind::Identity, ActivationKind::Relu, ActivationKind::Silu, ActivationKind::GeluTanh}) {
        EXPECT_LE(max_abs_diff(ffn(x, u, d, {k}), reference_ffn(x, u, d, {k})), 1e-12) << to_string(k);
    }
}

TEST(Ffn, PaddingPlacesZerosAfterEachShard) {
    std::mt19937_64 rng(2);
    const auto u = random_matrix(rng, 3, 8);
    const auto d = random_matrix(rng, 8, 3);
    const auto p = pad_weights(u, d, 4, 1);
    ASSERT_EQ(p.up.cols(), 12u);
    for (std::size_t c : {2u, 5u, 8u, 11u}) {
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_EQ(p.up(r, c), 0.0);
            EXPECT_EQ(p.down(c, r), 0.0);
        }
    }
    EXPECT_EQ(p.up(1, 3), u(1, 2));
    EXPECT_EQ(p.down(4, 2), d(3, 2));
}

TEST(Ffn, PaddingIsExactEvenWhenActivationOfZeroIsNonzero) {
    std::mt19937_64 rng(3);
    for (auto k : {ActivationKind::ShiftedIdentity, ActivationKind::Silu, ActivationKind::GeluTanh}) {
        for (int tp : {1, 2, 4}) {
            const auto x = random_matrix(rng, 4, 6);
            const auto u = random_matrix(rng, 6, 8);
            const auto d = random_matrix(rng, 8, 5);
            const auto p = pad_weights(u, d, tp, 3);
            const auto base = ffn(x, u, d, {k});
            EXPECT_LE(max_abs_diff(ffn_padded(x, p.up, p.down, {k}), base), 1e-12);
            const auto sharded = shard_ffn(x, p.up, p.down, tp, {k});
            EXPECT_LE(max_abs_diff(sharded.reduced, base), 1e-12);
        }
    }
}

TEST(Ffn, ReductionOrderOnlyChangesRounding) {
    std::mt19937_64 rng(4);
    const auto x = random_matrix(rng, 2, 4);
    const auto u = random_matrix(rng, 4, 8);
    const auto d = random_matrix(rng, 8, 3);
    const auto a = shard_ffn(x, u, d, 4, {ActivationKind::Relu});
    const auto b = shard_ffn(x, u, d, 4, {ActivationKind::Relu}, {3, 1, 0, 2});
    EXPECT_LE(max_abs_diff(a.reduced, b.reduced), 1e-14);
}

TEST(Ffn, ShapeErrors) {
    EXPECT_THROW(DenseMatrix(2, 2, std::vector<double>{1.0}), Error);
    EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), Error);
    EXPECT_THROW(pad_weights(DenseMatrix(2, 6), DenseMatrix(6, 2), 4, 1), Error);
    try {
        ffn(DenseMatrix(1, 2), DenseMatrix(3, 4), DenseMatrix(4, 1), {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

}  // namespace
}  // namespace tpshift::ffn
