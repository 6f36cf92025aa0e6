// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tpshift/error.hpp"

namespace tpshift::ffn {

/// Row-major dense matrix of doubles.
class DenseMatrix {
public:
    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw Error(ErrorCode::ShapeMismatch, "entry count " + std::to_string(data_.size()) + " != " +
                                                      std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    const std::vector<double>& data() const { return data_; }

    /// Columns [first, first + count).
    DenseMatrix columns(std::size_t first, std::size_t count) const {
        DenseMatrix out(rows_, count);
        for (std::size_t r = 0; r < rows_; ++r) {
            for (std::size_t c = 0; c < count; ++c) {
                out(r, c) = (*this)(r, first + c);
            }
        }
        return out;
    }

    /// Rows [first, first + count).
    DenseMatrix row_block(std::size_t first, std::size_t count) const {
        DenseMatrix out(count, cols_);
        for (std::size_t r = 0; r < count; ++r) {
            for (std::size_t c = 0; c < cols_; ++c) {
                out(r, c) = (*this)(first + r, c);
            }
        }
        return out;
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

enum class ActivationKind { Identity, Relu, Silu, GeluTanh, ShiftedIdentity };

/// Elementwise activation. ShiftedIdentity is x + 1, an activation with f(0) != 0.
struct Activation {
    ActivationKind kind = ActivationKind::Identity;

    double operator()(double x) const {
        switch (kind) {
        case ActivationKind::Identity: return x;
        case ActivationKind::Relu: return x > 0.0 ? x : 0.0;
        case ActivationKind::Silu: return x / (1.0 + std::exp(-x));
        case ActivationKind::GeluTanh: {
            constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
            return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
        }
        case ActivationKind::ShiftedIdentity: return x + 1.0;
        }
        return x;
    }
};

inline std::string to_string(ActivationKind k) {
    switch (k) {
    case ActivationKind::Identity: return "identity";
    case ActivationKind::Relu: return "relu";
    case ActivationKind::Silu: return "silu";
    case ActivationKind::GeluTanh: return "gelu-tanh";
    case ActivationKind::ShiftedIdentity: return "shifted";
    }
    return "?";
}

/// Naive i-k-j product; the summation order over k is fixed.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorCode::ShapeMismatch, std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
                                                  std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    DenseMatrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

inline DenseMatrix apply(const Activation& f, DenseMatrix m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m(r, c) = f(m(r, c));
        }
    }
    return m;
}

/// f(I x U) x D
inline DenseMatrix ffn(const DenseMatrix& input, const DenseMatrix& up, const DenseMatrix& down, const Activation& f) {
    if (input.cols() != up.rows() || up.cols() != down.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "ffn operands do not chain");
    }
    return matmul(apply(f, matmul(input, up)), down);
}

struct PaddedWeights {
    DenseMatrix up;
    DenseMatrix down;
};

/**
 * Inserts `pad` zero columns after each of the `tp` column shards of `up`
 * and matching zero rows after each row shard of `down`.
 */
inline PaddedWeights pad_weights(const DenseMatrix& up, const DenseMatrix& down, int tp, std::size_t pad) {
    if (tp < 1 || up.cols() % static_cast<std::size_t>(tp) != 0 || down.rows() != up.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "cannot pad " + std::to_string(up.cols()) + " columns into " +
                                                  std::to_string(tp) + " shards");
    }
    const std::size_t shard = up.cols() / static_cast<std::size_t>(tp);
    const std::size_t width = up.cols() + static_cast<std::size_t>(tp) * pad;
    PaddedWeights out{DenseMatrix(up.rows(), width), DenseMatrix(width, down.cols())};
    for (std::size_t s = 0; s < static_cast<std::size_t>(tp); ++s) {
        for (std::size_t c = 0; c < shard; ++c) {
            const std::size_t src = s * shard + c;
            const std::size_t dst = s * (shard + pad) + c;
            for (std::size_t r = 0; r < up.rows(); ++r) {
                out.up(r, dst) = up(r, src);
            }
            for (std::size_t k = 0; k < down.cols(); ++k) {
                out.down(dst, k) = down(src, k);
            }
        }
    }
    return out;
}

/// f(I x U') x D'. Same arithmetic as ffn; the padded intermediate columns meet zero rows of D'.
inline DenseMatrix ffn_padded(const DenseMatrix& input, const DenseMatrix& up_padded, const DenseMatrix& down_padded,
                              const Activation& f) {
    return ffn(input, up_padded, down_padded, f);
}

struct ShardedResult {
    std::vector<DenseMatrix> partials;  ///< one per worker, each shaped like the output
    DenseMatrix reduced;
};

/**
 * Column-parallel up projection, row-parallel down projection, then a sum
 * across workers (the all-reduce). `order` optionally permutes the reduction.
 */
inline ShardedResult shard_ffn(const DenseMatrix& input, const DenseMatrix& up_padded, const DenseMatrix& down_padded,
                               int tp, const Activation& f, const std::vector<int>& order = {}) {
    if (tp < 1 || up_padded.cols() % static_cast<std::size_t>(tp) != 0 || down_padded.rows() != up_padded.cols() ||
        input.cols() != up_padded.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "shards do not line up");
    }
    const std::size_t width = up_padded.cols() / static_cast<std::size_t>(tp);
    ShardedResult out;
    for (int w = 0; w < tp; ++w) {
        const std::size_t first = static_cast<std::size_t>(w) * width;
        out.partials.push_back(ffn(input, up_padded.columns(first, width), down_padded.row_block(first, width), f));
    }
    out.reduced = DenseMatrix(input.rows(), down_padded.cols());
    for (int i = 0; i < tp; ++i) {
        const auto& p = out.partials[order.empty() ? i : order.at(i)];
        for (std::size_t r = 0; r < p.rows(); ++r) {
            for (std::size_t c = 0; c < p.cols(); ++c) {
                out.reduced(r, c) += p(r, c);
            }
        }
    }
    return out;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "cannot compare differently shaped matrices");
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

}  // namespace tpshift::ffn
