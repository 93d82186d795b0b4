// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Multi-resolution hash-grid feature field with trilinear interpolation,
// coarse-to-fine level masking, and radial scene contraction.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace shelltex {

struct HashFieldConfig {
    int levels = 6;
    int log2_table_size = 19;
    int feat_dim = 4;
    int min_resolution = 16;
    int max_resolution = 512;
    double bound = 1.0;
    double init_range = 1e-4;

    /// Small profile used by unit tests and desk-scale runs.
    static HashFieldConfig desk() {
        HashFieldConfig c;
        c.levels = 2;
        c.log2_table_size = 10;
        c.feat_dim = 2;
        c.min_resolution = 4;
        c.max_resolution = 8;
        return c;
    }
};

/// Geometric level progression N_l = floor(N_min * b^l) with N_{L-1} = N_max.
inline std::vector<int> level_resolutions(int levels, int min_res, int max_res) {
    if (levels <= 0 || min_res <= 0 || max_res < min_res)
        throw ConfigError("hash field: invalid level/resolution configuration");
    std::vector<int> res(levels);
    if (levels == 1) {
        res[0] = min_res;
        return res;
    }
    const double growth = (std::log(double(max_res)) - std::log(double(min_res))) / double(levels - 1);
    for (int l = 0; l < levels; ++l)
        res[l] = static_cast<int>(std::floor(double(min_res) * std::exp(growth * l) + 1e-6));
    res.back() = max_res;
    for (int l = 1; l < levels; ++l)
        if (res[l] <= res[l - 1])
            throw ConfigError("hash field: level resolutions must be strictly increasing");
    return res;
}

/// Number of active levels, w_i = (i <= lambda).
struct AnnealState {
    int lambda = INT_MAX / 2;

    static AnnealState all() { return {}; }
    bool active(int level) const { return level <= lambda; }
};

template <class T> struct HashField {
    int levels = 0;
    std::uint32_t table_size = 0;
    int feat_dim = 0;
    std::vector<int> resolutions;
    T bound = T(1);
    std::vector<T> tables; // [level][entry][feature]

    static HashField create(const HashFieldConfig &cfg, Rng &rng) {
        if (cfg.log2_table_size < 1 || cfg.log2_table_size > 30)
            throw ConfigError("hash field: table size out of range");
        if (cfg.feat_dim <= 0)
            throw ConfigError("hash field: feature dimension must be positive");
        if (!(cfg.bound > 0.0))
            throw ConfigError("hash field: bound must be positive");
        HashField f;
        f.levels = cfg.levels;
        f.table_size = std::uint32_t(1) << cfg.log2_table_size;
        f.feat_dim = cfg.feat_dim;
        f.resolutions = level_resolutions(cfg.levels, cfg.min_resolution, cfg.max_resolution);
        f.bound = T(cfg.bound);
        f.tables.resize(std::size_t(f.levels) * f.table_size * f.feat_dim);
        for (auto &v : f.tables)
            v = T(rng.uniform(-cfg.init_range, cfg.init_range));
        return f;
    }

    int output_dim() const { return levels * feat_dim; }

    std::size_t level_offset(int level) const { return std::size_t(level) * table_size * feat_dim; }

    bool dense(int level) const {
        const std::uint64_t n = std::uint64_t(resolutions[level]) + 1;
        return n * n * n <= table_size;
    }

    /// Flat offset of the first feature stored for `entry` at `level`.
    std::size_t entry_offset(int level, std::uint32_t entry) const {
        return level_offset(level) + std::size_t(entry) * feat_dim;
    }

    template <class U> HashField<U> cast() const {
        HashField<U> f;
        f.levels = levels;
        f.table_size = table_size;
        f.feat_dim = feat_dim;
        f.resolutions = resolutions;
        f.bound = static_cast<U>(bound);
        f.tables.assign(tables.begin(), tables.end());
        return f;
    }
};

/// Table slot of integer grid vertex `vertex` at `level`: row-major when the
/// level fits the table densely, spatial XOR hash otherwise.
template <class T>
std::uint32_t hash_index(const std::array<std::uint32_t, 3> &vertex, int level, const HashField<T> &field) {
    if (field.dense(level)) {
        const std::uint32_t stride = std::uint32_t(field.resolutions[level]) + 1;
        return (vertex[0] * stride + vertex[1]) * stride + vertex[2];
    }
    constexpr std::uint32_t primes[3] = {1u, 2654435761u, 805459861u};
    const std::uint32_t h = (vertex[0] * primes[0]) ^ (vertex[1] * primes[1]) ^ (vertex[2] * primes[2]);
    return h & (field.table_size - 1);
}

namespace detail {

template <class T> struct CellCoords {
    std::array<std::uint32_t, 3> base;
    std::array<T, 3> frac;
};

template <class T> CellCoords<T> locate(const Vec3<T> &x, const HashField<T> &field, int level) {
    const int n = field.resolutions[level];
    CellCoords<T> c;
    for (int a = 0; a < 3; ++a) {
        const T pos = (x[a] + field.bound) / (T(2) * field.bound) * T(n);
        int cell = static_cast<int>(std::floor(pos));
        cell = std::clamp(cell, 0, n - 1);
        c.base[a] = static_cast<std::uint32_t>(cell);
        c.frac[a] = pos - T(cell);
    }
    return c;
}

template <class T> void check_domain(const Vec3<T> &x, const HashField<T> &field) {
    for (int a = 0; a < 3; ++a)
        if (!(std::abs(x[a]) <= field.bound))
            throw DomainError("hash field: query outside [-bound, bound]^3 (missing contraction?)");
}

} // namespace detail

namespace detail {

/// The 8 grid vertices around x at one level: flat table offsets, trilinear
/// weights and the per-axis linear factors (lo, hi) they are built from.
template <class T> struct LevelCorners {
    std::array<std::size_t, 8> offset;
    std::array<T, 8> weight;
    std::array<std::array<T, 2>, 3> factor;
};

template <class T> void level_corners(const Vec3<T> &x, const HashField<T> &field, int level, LevelCorners<T> &out) {
    const auto cell = locate(x, field, level);
    std::array<std::array<std::uint32_t, 2>, 3> v;
    for (int a = 0; a < 3; ++a) {
        v[a] = {cell.base[a], cell.base[a] + 1u};
        out.factor[a] = {T(1) - cell.frac[a], cell.frac[a]};
    }
    const std::size_t base = field.level_offset(level);
    const std::size_t F = std::size_t(field.feat_dim);
    if (field.dense(level)) {
        const std::uint32_t stride = std::uint32_t(field.resolutions[level]) + 1;
        for (int c = 0; c < 8; ++c) {
            const int i = (c >> 2) & 1, j = (c >> 1) & 1, k = c & 1;
            out.offset[c] = base + std::size_t((v[0][i] * stride + v[1][j]) * stride + v[2][k]) * F;
            out.weight[c] = out.factor[0][i] * out.factor[1][j] * out.factor[2][k];
        }
    } else {
        const std::uint32_t mask = field.table_size - 1;
        for (int c = 0; c < 8; ++c) {
            const int i = (c >> 2) & 1, j = (c >> 1) & 1, k = c & 1;
            const std::uint32_t h = v[0][i] ^ (v[1][j] * 2654435761u) ^ (v[2][k] * 805459861u);
            out.offset[c] = base + std::size_t(h & mask) * F;
            out.weight[c] = out.factor[0][i] * out.factor[1][j] * out.factor[2][k];
        }
    }
}

} // namespace detail

/// Writes the concatenated per-level features of `x` into `out`
/// (size L*F). Masked levels are written as zeros.
template <class T>
void encode(const Vec3<T> &x, const HashField<T> &field, const AnnealState &anneal, std::span<T> out) {
    detail::check_domain(x, field);
    const int F = field.feat_dim;
    detail::LevelCorners<T> lc;
    for (int l = 0; l < field.levels; ++l) {
        T *dst = out.data() + l * F;
        for (int k = 0; k < F; ++k)
            dst[k] = T(0);
        if (!anneal.active(l))
            continue;
        detail::level_corners(x, field, l, lc);
        for (int c = 0; c < 8; ++c) {
            const T *src = field.tables.data() + lc.offset[c];
            for (int k = 0; k < F; ++k)
                dst[k] += lc.weight[c] * src[k];
        }
    }
}

template <class T> std::vector<T> encode(const Vec3<T> &x, const HashField<T> &field, const AnnealState &anneal) {
    std::vector<T> out(field.output_dim());
    encode(x, field, anneal, std::span<T>(out));
    return out;
}

/// Reverse pass of encode(). `sink(flat_table_index, value)` receives every
/// table-entry contribution in level, corner, feature order. Returns the
/// gradient with respect to x (zero when `want_x_grad` is false).
template <class T, class Sink>
Vec3<T> encode_backward(const Vec3<T> &x, const HashField<T> &field, const AnnealState &anneal,
                        std::span<const T> upstream, Sink &&sink, bool want_x_grad = true) {
    detail::check_domain(x, field);
    const int F = field.feat_dim;
    Vec3<T> gx = Vec3<T>::Zero();
    detail::LevelCorners<T> lc;
    for (int l = 0; l < field.levels; ++l) {
        if (!anneal.active(l))
            continue;
        const T *up = upstream.data() + l * F;
        bool any = false;
        for (int k = 0; k < F; ++k)
            any = any || up[k] != T(0);
        if (!any)
            continue;
        detail::level_corners(x, field, l, lc);
        const T scale = T(field.resolutions[l]) / (T(2) * field.bound);
        for (int c = 0; c < 8; ++c) {
            const std::size_t off = lc.offset[c];
            T dot = T(0);
            for (int k = 0; k < F; ++k) {
                sink(off + k, lc.weight[c] * up[k]);
                dot += up[k] * field.tables[off + k];
            }
            if (want_x_grad) {
                const int i = (c >> 2) & 1, j = (c >> 1) & 1, k = c & 1;
                const T s = dot * scale;
                const T di = i ? T(1) : T(-1), dj = j ? T(1) : T(-1), dk = k ? T(1) : T(-1);
                gx[0] += s * di * lc.factor[1][j] * lc.factor[2][k];
                gx[1] += s * lc.factor[0][i] * dj * lc.factor[2][k];
                gx[2] += s * lc.factor[0][i] * lc.factor[1][j] * dk;
            }
        }
    }
    return gx;
}

/// Sparse table gradient: parallel arrays of flat table index and value.
template <class T> struct TableGrad {
    std::vector<std::size_t> index;
    std::vector<T> value;
};

template <class T> struct EncodeGrad {
    TableGrad<T> table;
    Vec3<T> x_grad = Vec3<T>::Zero();
};

template <class T>
EncodeGrad<T> encode_backward(const Vec3<T> &x, const HashField<T> &field, const AnnealState &anneal,
                              std::span<const T> upstream) {
    EncodeGrad<T> g;
    g.x_grad = encode_backward(x, field, anneal, upstream, [&](std::size_t i, T v) {
        g.table.index.push_back(i);
        g.table.value.push_back(v);
    });
    return g;
}

/// Maps R^3 into the ball of radius 2: identity inside the unit ball,
/// (2 - 1/|x|) x/|x| outside.
template <class T> Vec3<T> contract(const Vec3<T> &x) {
    const T r = x.norm();
    if (r <= T(1))
        return x;
    return (T(2) - T(1) / r) * (x / r);
}

/// Jacobian-transpose product of contract() at x.
template <class T> Vec3<T> contract_backward(const Vec3<T> &x, const Vec3<T> &upstream) {
    const T r = x.norm();
    if (r <= T(1))
        return upstream;
    const Vec3<T> dir = x / r;
    const T radial = dir.dot(upstream);
    const Vec3<T> tangential = upstream - dir * radial;
    return tangential * ((T(2) - T(1) / r) / r) + dir * (radial / (r * r));
}

} // namespace shelltex
