// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Procedural scenes of textured planes and spheres. Ground-truth images are
// produced by tracing the primitives analytically, independent of the
// splatting renderer.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/io/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace shelltex {

struct Albedo {
    enum class Kind { Checker, ValueNoise, Solid } kind = Kind::Checker;
    int cells = 6;          // checker cells per side (planes) or per longitude band (spheres)
    double frequency = 4.0; // value-noise lattice cells per side
    std::uint64_t seed = 0;
    Eigen::Vector3d color_a = Eigen::Vector3d(0.85, 0.25, 0.2);
    Eigen::Vector3d color_b = Eigen::Vector3d(0.15, 0.3, 0.8);
};

/// Square plane patch center + a*axis_u + b*axis_v, |a|, |b| <= half_size.
struct PlanePrim {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    Eigen::Vector3d axis_u = Eigen::Vector3d::UnitX();
    Eigen::Vector3d axis_v = Eigen::Vector3d::UnitY();
    double half_size = 0.5;
    Albedo albedo;

    Eigen::Vector3d normal() const { return axis_u.cross(axis_v).normalized(); }
    /// Texture coordinates in [0, 1]^2 of an in-plane point.
    Eigen::Vector2d uv(const Eigen::Vector3d &x) const {
        const Eigen::Vector3d r = x - center;
        return {(r.dot(axis_u) + half_size) / (2 * half_size), (r.dot(axis_v) + half_size) / (2 * half_size)};
    }
};

struct SpherePrim {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double radius = 0.2;
    Albedo albedo;
};

struct TraceHit {
    double t = std::numeric_limits<double>::infinity();
    int primitive = -1; // planes first, then spheres
    Eigen::Vector3d point = Eigen::Vector3d::Zero();
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

namespace detail {

inline double lattice_value(std::int64_t i, std::int64_t j, std::uint64_t seed) {
    std::uint64_t h = seed ^ 0x9E3779B97F4A7C15ull;
    h ^= std::uint64_t(i) * 0xBF58476D1CE4E5B9ull;
    h = (h ^ (h >> 31)) * 0x94D049BB133111EBull;
    h ^= std::uint64_t(j) * 0xD6E8FEB86659FD93ull;
    h = (h ^ (h >> 29)) * 0xBF58476D1CE4E5B9ull;
    h ^= h >> 32;
    return double(h & 0xFFFFFF) / double(0xFFFFFF);
}

inline double value_noise(double x, double y, std::uint64_t seed) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy);
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double tx = smooth(x - fx), ty = smooth(y - fy);
    const double a = lattice_value(i, j, seed), b = lattice_value(i + 1, j, seed);
    const double c = lattice_value(i, j + 1, seed), d = lattice_value(i + 1, j + 1, seed);
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

/// Albedo at 2D pattern coordinates in [0, 1]^2.
inline Eigen::Vector3d shade(const Albedo &al, double s, double t, int cells_t) {
    switch (al.kind) {
    case Albedo::Kind::Solid:
        return al.color_a;
    case Albedo::Kind::ValueNoise: {
        const double n = value_noise(s * al.frequency, t * al.frequency, al.seed);
        return al.color_a * (1 - n) + al.color_b * n;
    }
    case Albedo::Kind::Checker:
    default: {
        const int i = std::min(al.cells - 1, std::max(0, int(std::floor(s * al.cells))));
        const int j = std::min(cells_t - 1, std::max(0, int(std::floor(t * cells_t))));
        return ((i + j) % 2 == 0) ? al.color_a : al.color_b;
    }
    }
}

} // namespace detail

struct AnalyticScene {
    std::vector<PlanePrim> planes;
    std::vector<SpherePrim> spheres;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();

    /// Nearest hit with t > 0, if any.
    std::optional<TraceHit> trace(const Eigen::Vector3d &o, const Eigen::Vector3d &d) const {
        TraceHit best;
        for (std::size_t k = 0; k < planes.size(); ++k) {
            const auto &pl = planes[k];
            const Eigen::Vector3d n = pl.normal();
            const double denom = d.dot(n);
            if (std::abs(denom) < 1e-12)
                continue;
            const double t = (pl.center - o).dot(n) / denom;
            if (!(t > 1e-9) || t >= best.t)
                continue;
            const Eigen::Vector3d x = o + t * d;
            const Eigen::Vector2d uv = pl.uv(x);
            if (uv[0] < 0 || uv[0] > 1 || uv[1] < 0 || uv[1] > 1)
                continue;
            best.t = t;
            best.primitive = static_cast<int>(k);
            best.point = x;
            best.color = detail::shade(pl.albedo, uv[0], uv[1], pl.albedo.cells);
        }
        for (std::size_t k = 0; k < spheres.size(); ++k) {
            const auto &sp = spheres[k];
            const Eigen::Vector3d oc = o - sp.center;
            const double b = oc.dot(d), c = oc.squaredNorm() - sp.radius * sp.radius;
            const double disc = b * b - c;
            if (disc < 0)
                continue;
            const double sq = std::sqrt(disc);
            double t = -b - sq;
            if (!(t > 1e-9))
                t = -b + sq;
            if (!(t > 1e-9) || t >= best.t)
                continue;
            const Eigen::Vector3d x = o + t * d;
            best.t = t;
            best.primitive = static_cast<int>(planes.size() + k);
            best.point = x;
            best.color = sphere_color(sp, x);
        }
        if (best.primitive < 0)
            return std::nullopt;
        return best;
    }

    static Eigen::Vector3d sphere_color(const SpherePrim &sp, const Eigen::Vector3d &x) {
        const Eigen::Vector3d r = (x - sp.center) / sp.radius;
        const double lon = (std::atan2(r.y(), r.x()) + std::numbers::pi) / (2 * std::numbers::pi);
        const double lat = std::acos(std::clamp(r.z(), -1.0, 1.0)) / std::numbers::pi;
        return detail::shade(sp.albedo, lon, lat, std::max(1, sp.albedo.cells / 2));
    }

    /// Box-filtered color of pixel (x, y) from ss x ss stratified rays.
    Eigen::Vector3d pixel_color(const Camera &cam, int x, int y, int ss) const {
        Eigen::Vector3d acc = Eigen::Vector3d::Zero();
        for (int j = 0; j < ss; ++j)
            for (int i = 0; i < ss; ++i) {
                const Eigen::Vector3d d = cam.ray_dir(x + (i + 0.5) / ss, y + (j + 0.5) / ss);
                const auto hit = trace(cam.origin(), d);
                acc += hit ? hit->color : background;
            }
        return acc / double(ss * ss);
    }

    Image render(const Camera &cam, int ss) const {
        Image img(cam.width, cam.height, 3);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                const Eigen::Vector3d c = pixel_color(cam, x, y, ss);
                for (int k = 0; k < 3; ++k)
                    img.at(x, y, k) = float(c[k]);
            }
        return img;
    }

    /// Area-weighted random surface samples colored by albedo.
    std::vector<SeedPoint> sample_points(int count, double noise, Rng &rng) const {
        std::vector<double> area;
        for (const auto &p : planes)
            area.push_back(4 * p.half_size * p.half_size);
        for (const auto &s : spheres)
            area.push_back(4 * std::numbers::pi * s.radius * s.radius);
        double total = 0;
        for (double a : area)
            total += a;
        std::vector<SeedPoint> pts;
        if (total <= 0)
            return pts;
        for (int n = 0; n < count; ++n) {
            double pick = rng.uniform() * total;
            std::size_t k = 0;
            while (k + 1 < area.size() && pick > area[k]) {
                pick -= area[k];
                ++k;
            }
            SeedPoint sp;
            if (k < planes.size()) {
                const auto &pl = planes[k];
                const double a = rng.uniform(-pl.half_size, pl.half_size);
                const double b = rng.uniform(-pl.half_size, pl.half_size);
                sp.position = pl.center + a * pl.axis_u + b * pl.axis_v;
                const Eigen::Vector2d uv = pl.uv(sp.position);
                sp.color = detail::shade(pl.albedo, uv[0], uv[1], pl.albedo.cells);
            } else {
                const auto &s = spheres[k - planes.size()];
                Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
                dir.normalize();
                sp.position = s.center + s.radius * dir;
                sp.color = sphere_color(s, sp.position);
            }
            sp.position += noise * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
            pts.push_back(sp);
        }
        return pts;
    }
};

struct SceneSpec {
    std::string preset = "checker-plane-sphere";
    int width = 64, height = 64;
    int train_views = 20, test_views = 5;
    double camera_distance = 1.0;
    double fov_x = 60.0 * std::numbers::pi / 180.0;
    double elevation_low = 40.0, elevation_high = 65.0, elevation_test = 52.0; // degrees
    int supersample = 3;
    int seed_points = 300;
    double seed_noise = 0.005;
    bool value_noise = false; // replace checker albedo with value noise
    Eigen::Vector3d background = Eigen::Vector3d::Ones(); // object-style white backdrop
    std::uint64_t seed = 0;
};

/// Primitive sets of the named presets.
inline AnalyticScene make_preset(const SceneSpec &spec) {
    AnalyticScene sc;
    auto plane = [&](int cells) {
        PlanePrim p;
        p.half_size = 0.5;
        p.albedo.cells = cells;
        if (spec.value_noise) {
            p.albedo.kind = Albedo::Kind::ValueNoise;
            p.albedo.frequency = cells;
            p.albedo.seed = spec.seed;
        }
        return p;
    };
    if (spec.preset == "checker-plane") {
        sc.planes.push_back(plane(6));
    } else if (spec.preset == "checker-plane-sphere") {
        sc.planes.push_back(plane(6));
        SpherePrim s;
        s.center = Eigen::Vector3d(0.08, -0.06, 0.16);
        s.radius = 0.16;
        s.albedo.cells = 8;
        s.albedo.color_a = Eigen::Vector3d(0.95, 0.85, 0.2);
        s.albedo.color_b = Eigen::Vector3d(0.2, 0.7, 0.3);
        sc.spheres.push_back(s);
    } else if (spec.preset == "hf-checker-plane") {
        sc.planes.push_back(plane(12));
    } else if (spec.preset != "empty") {
        throw ConfigError("unknown synthetic preset: " + spec.preset);
    }
    return sc;
}

struct GeneratedScene {
    Dataset dataset;
    AnalyticScene scene;
};

/// Ring cameras around the origin looking at it, world up = +z.
inline std::vector<Camera> ring_cameras(const SceneSpec &spec, int count, double elev_a, double elev_b,
                                        double azimuth_offset, Rng &rng) {
    std::vector<Camera> cams;
    for (int i = 0; i < count; ++i) {
        const double az = 2 * std::numbers::pi * (i + azimuth_offset) / count + rng.uniform(-0.05, 0.05);
        const double el = (i % 2 == 0 ? elev_a : elev_b) * std::numbers::pi / 180.0;
        const Eigen::Vector3d eye = spec.camera_distance *
                                    Eigen::Vector3d(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
        cams.push_back(Camera::look_at(eye, Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(), spec.fov_x, spec.width,
                                       spec.height));
    }
    return cams;
}

inline GeneratedScene generate_scene(const SceneSpec &spec) {
    if (spec.width <= 0 || spec.height <= 0)
        throw ConfigError("synthetic scene: image size must be positive");
    if (spec.train_views <= 0 || spec.test_views <= 0)
        throw ConfigError("synthetic scene: need at least one train and one test view");
    if (spec.supersample <= 0 || !(spec.camera_distance > 0) || !(spec.fov_x > 0 && spec.fov_x < std::numbers::pi))
        throw ConfigError("synthetic scene: invalid sampling or camera parameters");
    GeneratedScene g;
    g.scene = make_preset(spec);
    g.scene.background = spec.background;
    Rng rng(spec.seed);
    auto &ds = g.dataset;
    ds.name = "synthetic:" + spec.preset;
    ds.kind = SceneKind::Bounded;
    ds.background = g.scene.background;
    const auto train = ring_cameras(spec, spec.train_views, spec.elevation_low, spec.elevation_high, 0.0, rng);
    const auto test = ring_cameras(spec, spec.test_views, spec.elevation_test, spec.elevation_test, 0.5, rng);
    for (std::size_t i = 0; i < train.size(); ++i)
        ds.train.push_back({"train_" + std::to_string(i), train[i], g.scene.render(train[i], spec.supersample)});
    for (std::size_t i = 0; i < test.size(); ++i)
        ds.test.push_back({"test_" + std::to_string(i), test[i], g.scene.render(test[i], spec.supersample)});
    ds.points = g.scene.sample_points(spec.seed_points, spec.seed_noise, rng);
    return g;
}

} // namespace shelltex
