// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Adaptive density control: clone/split surfels with large view-space
// positional gradients, prune transparent ones, periodic opacity reset.
//
#pragma once

#include "shelltex/core/math.hpp"
#include "shelltex/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace shelltex {

struct DensifyConfig {
    double grad_threshold = 4e-4;
    double split_extent_fraction = 0.01; // max scale above this fraction of the extent splits
    double split_scale_divisor = 1.6;
    double prune_opacity = 0.005;
    double reset_opacity = 0.05;
    int reset_every = 3000;
    int prune_freeze = 1000;
    int max_surfels = 0; // 0 = unlimited
};

/// Per-surfel accumulated view-space gradient norms since the last densify.
struct DensifyStats {
    std::vector<double> grad_sum;
    std::vector<int> views;

    void reset(std::size_t n) {
        grad_sum.assign(n, 0.0);
        views.assign(n, 0);
    }

    template <class T> void add(std::span<const T> viewspace, std::span<const std::uint8_t> visible) {
        for (std::size_t i = 0; i < grad_sum.size() && i < viewspace.size(); ++i)
            if (visible[i]) {
                grad_sum[i] += double(viewspace[i]);
                ++views[i];
            }
    }

    double mean(std::size_t i) const { return views[i] > 0 ? grad_sum[i] / views[i] : 0.0; }
};

struct DensifyResult {
    std::vector<int> source; // per surviving/new surfel: previous index, or -1 for split children
    int cloned = 0, split = 0, pruned = 0;
    bool reset = false;
};

/// True while pruning is suspended after an opacity reset.
inline bool prune_frozen(int iter, const DensifyConfig &cfg) {
    if (cfg.reset_every <= 0)
        return false;
    const int last = (iter / cfg.reset_every) * cfg.reset_every;
    return last > 0 && iter - last < cfg.prune_freeze;
}

/// Densify, then prune, then (when due) reset opacities. `extent` is the
/// scene radius used by the split/clone decision.
template <class T>
DensifyResult densify_and_prune(std::vector<Surfel<T>> &surfels, const DensifyStats &stats, int iter, double extent,
                                const DensifyConfig &cfg, Rng &rng) {
    DensifyResult res;
    const std::size_t n0 = surfels.size();
    std::vector<int> candidates;
    for (std::size_t i = 0; i < n0; ++i)
        if (stats.mean(i) > cfg.grad_threshold)
            candidates.push_back(static_cast<int>(i));
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](int a, int b) { return stats.mean(a) > stats.mean(b); });

    std::vector<Surfel<T>> next;
    std::vector<int> source;
    std::vector<char> replaced(n0, 0);
    std::vector<Surfel<T>> extra;
    std::vector<int> extra_source;
    std::size_t count = n0;
    const T shrink = T(std::log(cfg.split_scale_divisor));
    for (int i : candidates) {
        if (cfg.max_surfels > 0 && count + 1 > std::size_t(cfg.max_surfels))
            break;
        const Surfel<T> &s = surfels[i];
        const Vec2<T> sc = s.scale();
        if (double(std::max(sc[0], sc[1])) > cfg.split_extent_fraction * extent) {
            const Mat3<T> R = s.rotation_matrix();
            for (int c = 0; c < 2; ++c) {
                Surfel<T> child = s;
                const T a = T(rng.normal()) * sc[0], b = T(rng.normal()) * sc[1];
                child.position = s.position + a * R.col(0) + b * R.col(1);
                child.log_scale = s.log_scale.array() - shrink;
                extra.push_back(std::move(child));
                extra_source.push_back(-1);
            }
            replaced[i] = 1;
            ++res.split;
        } else {
            extra.push_back(s);
            extra_source.push_back(i);
            ++res.cloned;
        }
        ++count;
    }
    for (std::size_t i = 0; i < n0; ++i)
        if (!replaced[i]) {
            next.push_back(surfels[i]);
            source.push_back(static_cast<int>(i));
        }
    for (std::size_t k = 0; k < extra.size(); ++k) {
        next.push_back(std::move(extra[k]));
        source.push_back(extra_source[k]);
    }

    if (!prune_frozen(iter, cfg)) {
        std::vector<Surfel<T>> kept;
        std::vector<int> kept_source;
        for (std::size_t i = 0; i < next.size(); ++i) {
            if (double(next[i].opacity()) < cfg.prune_opacity) {
                ++res.pruned;
                continue;
            }
            kept.push_back(std::move(next[i]));
            kept_source.push_back(source[i]);
        }
        next = std::move(kept);
        source = std::move(kept_source);
    }

    if (cfg.reset_every > 0 && iter > 0 && iter % cfg.reset_every == 0) {
        const T lg = logit(T(cfg.reset_opacity));
        for (auto &s : next)
            s.opacity_logit = lg;
        res.reset = true;
    }
    surfels = std::move(next);
    res.source = std::move(source);
    return res;
}

} // namespace shelltex
