#pragma once

// Rotary position embedding: consecutive coordinate pairs of a head vector
// are rotated by position-dependent angles, so attention scores depend only
// on relative position. Frequencies are fixed at the standard inverse
// power-law schedule; the table is immutable after construction.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmr/tensor.hpp"

namespace mmr {

template <class Real>
struct RopeTable {
    std::size_t head_dim = 0;  // even
    double base = 10000.0;
    std::size_t max_positions = 0;
    std::vector<Real> cos_table;  // [max_positions x head_dim/2]
    std::vector<Real> sin_table;

    static RopeTable create(std::size_t head_dim, std::size_t max_positions,
                            double base = 10000.0) {
        if (head_dim == 0 || head_dim % 2 != 0)
            throw std::invalid_argument("rope: head_dim must be even and positive, got " +
                                        std::to_string(head_dim));
        RopeTable t;
        t.head_dim = head_dim;
        t.base = base;
        t.max_positions = max_positions;
        const std::size_t half = head_dim / 2;
        t.cos_table.resize(max_positions * half);
        t.sin_table.resize(max_positions * half);
        for (std::size_t m = 0; m < max_positions; ++m) {
            for (std::size_t j = 0; j < half; ++j) {
                // angle(m, j) = m * base^(-2j / head_dim), evaluated in double
                // so that extended tables stay bit-identical on the prefix.
                const double freq =
                    std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
                const double angle = static_cast<double>(m) * freq;
                t.cos_table[m * half + j] = static_cast<Real>(std::cos(angle));
                t.sin_table[m * half + j] = static_cast<Real>(std::sin(angle));
            }
        }
        return t;
    }
};

// Returns a longer table whose leading rows are bit-identical to the input.
template <class Real>
RopeTable<Real> rope_extend(const RopeTable<Real>& table, std::size_t new_max) {
    if (new_max <= table.max_positions)
        throw std::invalid_argument("rope_extend: new max " + std::to_string(new_max) +
                                    " must exceed current " + std::to_string(table.max_positions));
    return RopeTable<Real>::create(table.head_dim, new_max, table.base);
}

// Rotates each consecutive pair (x[2j], x[2j+1]) of every row by the row's
// position angle. Norm-preserving; backward applies the inverse rotation.
template <class Real>
Tensor<Real> rope_apply(const Tensor<Real>& x, const std::vector<std::size_t>& positions,
                        const RopeTable<Real>& table) {
    if (x.ndim() != 2 || x.cols() != table.head_dim)
        throw std::invalid_argument("rope_apply: last extent of " + detail::shape_str(x.shape()) +
                                    " must equal head_dim " + std::to_string(table.head_dim));
    if (positions.size() != x.rows())
        throw std::invalid_argument("rope_apply: " + std::to_string(positions.size()) +
                                    " positions for " + std::to_string(x.rows()) + " rows");
    for (std::size_t p : positions)
        if (p >= table.max_positions)
            throw std::invalid_argument("rope_apply: position " + std::to_string(p) +
                                        " outside table range " +
                                        std::to_string(table.max_positions));

    const std::size_t n = x.rows(), d = table.head_dim, half = d / 2;
    std::vector<Real> out(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const Real* cs = table.cos_table.data() + positions[i] * half;
        const Real* sn = table.sin_table.data() + positions[i] * half;
        const Real* xi = x.data() + i * d;
        Real* yi = out.data() + i * d;
        for (std::size_t j = 0; j < half; ++j) {
            const Real x0 = xi[2 * j], x1 = xi[2 * j + 1];
            yi[2 * j] = cs[j] * x0 - sn[j] * x1;
            yi[2 * j + 1] = sn[j] * x0 + cs[j] * x1;
        }
    }
    // Copy the needed trig rows so the lambda does not dangle on the table.
    std::vector<Real> cos_rows(n * half), sin_rows(n * half);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(table.cos_table.data() + positions[i] * half, half, cos_rows.data() + i * half);
        std::copy_n(table.sin_table.data() + positions[i] * half, half, sin_rows.data() + i * half);
    }
    return Tensor<Real>::make(
        Shape{n, d}, std::move(out), {x},
        [n, d, half, cos_rows = std::move(cos_rows),
         sin_rows = std::move(sin_rows)](TensorNode<Real>& self) {
            auto& px = *self.parents[0];
            if (!px.requires_grad) return;
            px.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const Real* cs = cos_rows.data() + i * half;
                const Real* sn = sin_rows.data() + i * half;
                const Real* gi = self.grad.data() + i * d;
                Real* dxi = px.grad.data() + i * d;
                for (std::size_t j = 0; j < half; ++j) {
                    const Real g0 = gi[2 * j], g1 = gi[2 * j + 1];
                    dxi[2 * j] += cs[j] * g0 + sn[j] * g1;
                    dxi[2 * j + 1] += -sn[j] * g0 + cs[j] * g1;
                }
            }
        });
}

}  // namespace mmr
