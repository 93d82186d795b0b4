// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Bias-corrected Adam over flat parameter buffers.
//
#pragma once

#include "shelltex/core/errors.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace shelltex {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

template <class T> struct AdamState {
    std::vector<T> m, v;
    std::int64_t step = 0;

    explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}

    std::size_t size() const { return m.size(); }

    /// Rebuilds moments after the parameter rows were reordered: new row r
    /// takes old row source[r], or zeros when source[r] < 0.
    void remap_rows(std::span<const int> source, int stride) {
        std::vector<T> nm(source.size() * stride, T(0)), nv(source.size() * stride, T(0));
        for (std::size_t r = 0; r < source.size(); ++r) {
            if (source[r] < 0)
                continue;
            for (int k = 0; k < stride; ++k) {
                nm[r * stride + k] = m[std::size_t(source[r]) * stride + k];
                nv[r * stride + k] = v[std::size_t(source[r]) * stride + k];
            }
        }
        m = std::move(nm);
        v = std::move(nv);
    }
};

/// One Adam step. `lr` is applied cyclically: parameter i uses lr[i % lr.size()],
/// which lets a packed row of mixed groups carry per-slot learning rates.
template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T> &state, std::span<const double> lr,
               const AdamConfig &cfg = {}) {
    if (params.size() != grads.size() || params.size() != state.size())
        throw DomainError("adam_step: parameter, gradient and moment sizes differ");
    if (lr.empty())
        throw DomainError("adam_step: empty learning-rate pattern");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
    const std::size_t period = lr.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
        state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
        const double mhat = double(state.m[i]) / bc1;
        const double vhat = double(state.v[i]) / bc2;
        params[i] -= T(lr[i % period] * mhat / (std::sqrt(vhat) + cfg.eps));
    }
}

template <class T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamState<T> &state, double lr,
               const AdamConfig &cfg = {}) {
    const double pattern[1] = {lr};
    adam_step(params, grads, state, std::span<const double>(pattern, 1), cfg);
}

} // namespace shelltex
