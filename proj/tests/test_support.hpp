// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures: micro scenes, finite differences, random generators.
//
#pragma once

#include "shelltex/shelltex.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace shelltex::testing {

inline Camera micro_camera(int size = 8, double distance = 1.2) {
    return Camera::look_at(Eigen::Vector3d(0.15, -0.1, distance), Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(0, -1, 0),
                           60.0 * std::numbers::pi / 180.0, size, size);
}

inline Vec4<double> random_unit_quat(Rng &rng) {
    Vec4<double> q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    return q / q.norm();
}

/// Quaternion of a rotation by `angle` about `axis`.
inline Vec4<double> axis_angle_quat(const Vec3<double> &axis, double angle) {
    const Vec3<double> a = axis.normalized() * std::sin(0.5 * angle);
    return Vec4<double>(std::cos(0.5 * angle), a.x(), a.y(), a.z());
}

/// Surfels roughly facing +z, scattered around the origin at distinct depths.
inline std::vector<Surfel<double>> micro_surfels(Rng &rng, int count, int sh_degree = -1) {
    std::vector<Surfel<double>> out;
    for (int i = 0; i < count; ++i) {
        Surfel<double> s;
        s.position = Vec3<double>(rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), 0.3 - 0.12 * i + rng.uniform(-0.02, 0.02));
        const Vec3<double> axis(rng.normal(), rng.normal(), rng.normal());
        s.rotation = axis_angle_quat(axis, rng.uniform(-0.7, 0.7));
        s.log_scale = Vec2<double>(std::log(rng.uniform(0.12, 0.3)), std::log(rng.uniform(0.12, 0.3)));
        s.opacity_logit = logit(rng.uniform(0.3, 0.8));
        if (sh_degree >= 0) {
            s.sh.resize(3 * sh_coeff_count(sh_degree));
            for (auto &c : s.sh)
                c = rng.uniform(-0.6, 0.6);
        }
        out.push_back(s);
    }
    return out;
}

/// Shell-mode micro scene with a dense two-level field.
inline Scene<double> micro_shell_scene(std::uint64_t seed, int count = 6) {
    Rng rng(seed);
    Scene<double> sc;
    sc.surfels = micro_surfels(rng, count);
    HashFieldConfig fc;
    fc.levels = 2;
    fc.log2_table_size = 10;
    fc.feat_dim = 2;
    fc.min_resolution = 3;
    fc.max_resolution = 5;
    fc.init_range = 0.8;
    sc.field = HashField<double>::create(fc, rng);
    sc.decoder = Decoder<double>::standard(sc.field->output_dim(), rng, 16, 2);
    sc.background = Vec3<double>(0.2, 0.3, 0.1);
    return sc;
}

inline Scene<double> micro_sh_scene(std::uint64_t seed, int count = 6, int degree = 2) {
    Rng rng(seed);
    Scene<double> sc;
    sc.surfels = micro_surfels(rng, count, degree);
    sc.sh_degree = degree;
    sc.background = Vec3<double>(0.1, 0.2, 0.4);
    return sc;
}

inline std::vector<double> random_image(Rng &rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto &x : v)
        x = rng.uniform();
    return v;
}

/// |a - b| against a relative tolerance with a small absolute floor.
inline bool grad_close(double analytic, double numeric, double rel, double abs_floor = 1e-8) {
    return std::abs(analytic - numeric) <= rel * std::max(std::abs(analytic), std::abs(numeric)) + abs_floor;
}

inline double central_difference(const std::function<double()> &f, double &param, double h) {
    const double keep = param;
    param = keep + h;
    const double fp = f();
    param = keep - h;
    const double fm = f();
    param = keep;
    return (fp - fm) / (2.0 * h);
}

inline double &surfel_slot(Surfel<double> &s, int slot) {
    if (slot < Surfel<double>::kRot)
        return s.position[slot];
    if (slot < Surfel<double>::kScale)
        return s.rotation[slot - Surfel<double>::kRot];
    if (slot < Surfel<double>::kOpacity)
        return s.log_scale[slot - Surfel<double>::kScale];
    if (slot == Surfel<double>::kOpacity)
        return s.opacity_logit;
    return s.sh[slot - Surfel<double>::kSh];
}

struct AuditSample {
    std::string group;
    double analytic = 0, numeric = 0;
};

struct AuditReport {
    std::vector<AuditSample> samples;
    double max_rel_error = 0;
    int failures = 0;
    LossTerms terms;

    int count(const std::string &group) const {
        return int(std::count_if(samples.begin(), samples.end(), [&](const auto &s) { return s.group == group; }));
    }
};

/// Compares backward-pass gradients of the full per-view loss against central
/// differences. Every surfel parameter is checked, plus up to
/// `extra_samples` table entries touched by the view and decoder weights.
inline AuditReport gradient_audit(Scene<double> scene, const Camera &cam, const std::vector<double> &target,
                                  const std::vector<double> &alpha_target, const LossWeights &weights,
                                  bool regularize, int extra_samples, std::uint64_t seed, double rel_tol = 1e-4,
                                  const BackwardOptions &bopt = {}, double h = 1e-6) {
    const RenderMode mode = scene.field ? RenderMode::Shell : RenderMode::Sh;
    auto loss = [&]() {
        const auto r = render(scene, cam, mode);
        return view_loss<double>(r, cam, target, alpha_target, weights, regularize).total;
    };
    const auto r = render(scene, cam, mode);
    const auto vl = view_loss<double>(r, cam, target, alpha_target, weights, regularize);
    const auto g = render_backward(scene, cam, r, vl.pixel, vl.hit, bopt);

    AuditReport rep;
    rep.terms = vl.terms;
    auto check = [&](const std::string &group, double &param, double analytic) {
        const double numeric = central_difference(loss, param, h);
        const double err = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4});
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        if (err > rel_tol)
            ++rep.failures;
        rep.samples.push_back({group, analytic, numeric});
    };
    static const char *names[] = {"position", "position", "position", "rotation", "rotation", "rotation",
                                  "rotation", "scale",    "scale",    "opacity"};
    for (std::size_t i = 0; i < scene.surfels.size(); ++i) {
        const int n = scene.surfels[i].param_count();
        for (int k = 0; k < n; ++k)
            check(k < Surfel<double>::kSh ? names[k] : "sh", surfel_slot(scene.surfels[i], k),
                  g.surfel(int(i), k));
    }
    Rng rng(seed);
    if (scene.field) {
        std::vector<std::size_t> touched;
        for (std::size_t k = 0; k < g.table.size(); ++k)
            if (g.table[k] != 0.0)
                touched.push_back(k);
        for (int s = 0; s < extra_samples && !touched.empty(); ++s) {
            const std::size_t k = touched[rng.below(touched.size())];
            check("table", scene.field->tables[k], g.table[k]);
        }
        for (int s = 0; s < extra_samples; ++s) {
            const std::size_t k = rng.below(g.decoder.size());
            check("decoder", scene.decoder->params()[k], g.decoder[k]);
        }
    }
    return rep;
}

} // namespace shelltex::testing
