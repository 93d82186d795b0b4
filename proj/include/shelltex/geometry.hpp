// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Surfels (planar 2D Gaussians), pinhole cameras and ray-splat intersection.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shelltex {

/// Number of real SH coefficients per color channel for a band-limit `degree`.
constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// One planar Gaussian primitive.
///
/// Scales and opacity are stored in unconstrained form (log-scale and logit)
/// so that every stored value is a free optimization variable. The
/// geometry footprint is the 10 scalars position(3) + rotation(4) +
/// log_scale(2) + opacity_logit(1). When present, `sh` holds
/// sh_coeff_count(D) * 3 coefficients laid out coefficient-major, channel-minor.
template <class T> struct Surfel {
    static constexpr int kPos = 0;
    static constexpr int kRot = 3;
    static constexpr int kScale = 7;
    static constexpr int kOpacity = 9;
    static constexpr int kSh = 10;
    static constexpr int kGeometryParams = 10;

    Vec3<T> position = Vec3<T>::Zero();
    Vec4<T> rotation = Vec4<T>(T(1), T(0), T(0), T(0)); // (w, x, y, z)
    Vec2<T> log_scale = Vec2<T>::Zero();
    T opacity_logit = T(0);
    std::vector<T> sh;

    Vec2<T> scale() const { return log_scale.array().exp(); }
    T opacity() const { return sigmoid(opacity_logit); }
    Mat3<T> rotation_matrix() const { return quat_to_rotation(rotation); }
    Vec3<T> normal() const { return rotation_matrix().col(2); }

    /// SH band-limit carried by this surfel, or -1 when it has none.
    int sh_degree() const {
        if (sh.empty())
            return -1;
        const int k = static_cast<int>(sh.size()) / 3;
        return static_cast<int>(std::lround(std::sqrt(double(k)))) - 1;
    }

    int param_count() const { return kGeometryParams + static_cast<int>(sh.size()); }

    void write_params(T *out) const {
        for (int i = 0; i < 3; ++i)
            out[kPos + i] = position[i];
        for (int i = 0; i < 4; ++i)
            out[kRot + i] = rotation[i];
        out[kScale] = log_scale[0];
        out[kScale + 1] = log_scale[1];
        out[kOpacity] = opacity_logit;
        std::copy(sh.begin(), sh.end(), out + kSh);
    }

    void read_params(const T *in) {
        for (int i = 0; i < 3; ++i)
            position[i] = in[kPos + i];
        for (int i = 0; i < 4; ++i)
            rotation[i] = in[kRot + i];
        log_scale = Vec2<T>(in[kScale], in[kScale + 1]);
        opacity_logit = in[kOpacity];
        std::copy(in + kSh, in + kSh + sh.size(), sh.begin());
    }

    template <class U> Surfel<U> cast() const {
        Surfel<U> s;
        s.position = position.template cast<U>();
        s.rotation = rotation.template cast<U>();
        s.log_scale = log_scale.template cast<U>();
        s.opacity_logit = static_cast<U>(opacity_logit);
        s.sh.assign(sh.begin(), sh.end());
        return s;
    }
};

/// Pinhole camera (OpenCV axes: +x right, +y down, +z forward). Kept in
/// double regardless of the scene scalar so cameras round-trip exactly
/// through manifests.
struct Camera {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity(); // world_from_camera
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();   // camera center in world

    Eigen::Vector3d origin() const { return translation; }

    /// Unit world-space direction through pixel coordinate (px, py); pixel
    /// centers sit at half-integers.
    Eigen::Vector3d ray_dir(double px, double py) const {
        const Eigen::Vector3d dc((px - cx) / fx, (py - cy) / fy, 1.0);
        return (rotation * dc).normalized();
    }

    Eigen::Vector3d pixel_ray(int x, int y) const { return ray_dir(x + 0.5, y + 0.5); }

    Eigen::Vector3d to_camera(const Eigen::Vector3d &world) const {
        return rotation.transpose() * (world - translation);
    }

    /// Throws DomainError when intrinsics or the rotation are invalid.
    void validate(double tol = 1e-6) const {
        if (!(fx > 0.0) || !(fy > 0.0))
            throw DomainError("camera focal lengths must be positive");
        if (width <= 0 || height <= 0)
            throw DomainError("camera dimensions must be positive");
        const double err = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
        if (err > tol || rotation.determinant() < 0.0)
            throw DomainError("camera rotation is not orthonormal");
    }

    /// Camera looking from `eye` towards `target`; `up` is the approximate
    /// world up direction (image -y).
    static Camera look_at(const Eigen::Vector3d &eye, const Eigen::Vector3d &target,
                          const Eigen::Vector3d &up, double fov_x, int width, int height) {
        Camera cam;
        cam.width = width;
        cam.height = height;
        cam.fx = cam.fy = 0.5 * width / std::tan(0.5 * fov_x);
        cam.cx = 0.5 * width;
        cam.cy = 0.5 * height;
        const Eigen::Vector3d z = (target - eye).normalized();
        const Eigen::Vector3d x = z.cross(up).normalized();
        const Eigen::Vector3d y = z.cross(x);
        cam.rotation.col(0) = x;
        cam.rotation.col(1) = y;
        cam.rotation.col(2) = z;
        cam.translation = eye;
        return cam;
    }
};

/// A ray-splat hit.
template <class T> struct Intersection {
    int surfel_index = -1;
    T u = T(0), v = T(0);
    T depth = T(0); // distance along the unit ray
    T weight = T(0);
    Vec3<T> world_point = Vec3<T>::Zero();
};

/// Tunables shared by intersection and rasterization.
struct SplatLimits {
    double sigma_cutoff = 3.0;      // hits with u^2 + v^2 > cutoff^2 are dropped
    double near_clip = 0.01;        // world units
    double parallel_epsilon = 1e-9; // |<dir, normal>| below this is no hit
};

/// Homogeneous splat-to-world transform: columns (s0 r0, s1 r1, 0, p).
/// Applying it to (u, v, 1, 1) gives the world point on the splat plane.
template <class T> Mat4<T> splat_to_world(const Surfel<T> &surfel) {
    const Mat3<T> R = surfel.rotation_matrix();
    const Vec2<T> s = surfel.scale();
    Mat4<T> H = Mat4<T>::Zero();
    H.template block<3, 1>(0, 0) = s[0] * R.col(0);
    H.template block<3, 1>(0, 1) = s[1] * R.col(1);
    H.template block<3, 1>(0, 3) = surfel.position;
    H(3, 3) = T(1);
    return H;
}

template <class T> Vec3<T> splat_point(const Surfel<T> &surfel, T u, T v) {
    const Mat4<T> H = splat_to_world(surfel);
    const Vec4<T> w = H * Vec4<T>(u, v, T(1), T(1));
    return w.template head<3>();
}

/// Gaussian falloff in splat-local coordinates.
template <class T> T gaussian_weight(T u, T v) { return std::exp(-(u * u + v * v) / T(2)); }

namespace detail {

/// Local-plane solve shared by intersect() and the rasterizer. Fills the
/// hit without applying the Gaussian cutoff; returns false on parallel rays
/// or hits behind the near clip.
template <class T>
bool intersect_plane(const Vec3<T> &origin, const Vec3<T> &dir, const Vec3<T> &p, const Mat3<T> &R,
                     const Vec2<T> &s, const SplatLimits &limits, T &u, T &v, T &t) {
    const Vec3<T> n = R.col(2);
    const T denom = dir.dot(n);
    if (std::abs(denom) < T(limits.parallel_epsilon))
        return false;
    t = (p - origin).dot(n) / denom;
    if (!(t > T(limits.near_clip)))
        return false;
    const Vec3<T> rel = origin + t * dir - p;
    u = rel.dot(R.col(0)) / s[0];
    v = rel.dot(R.col(1)) / s[1];
    return true;
}

} // namespace detail

/// Exact ray-splat intersection in the splat's local frame. `ray_dir` must
/// be unit length.
template <class T>
std::optional<Intersection<T>> intersect(const Vec3<T> &ray_origin, const Vec3<T> &ray_dir,
                                         const Surfel<T> &surfel, int surfel_index = 0,
                                         const SplatLimits &limits = {}) {
    if (std::abs(ray_dir.norm() - T(1)) > T(1e-6))
        throw DomainError("intersect: ray direction must be unit length");
    const Mat3<T> R = surfel.rotation_matrix();
    const Vec2<T> s = surfel.scale();
    T u, v, t;
    if (!detail::intersect_plane(ray_origin, ray_dir, surfel.position, R, s, limits, u, v, t))
        return std::nullopt;
    const T cutoff = T(limits.sigma_cutoff);
    if (u * u + v * v > cutoff * cutoff)
        return std::nullopt;
    Intersection<T> hit;
    hit.surfel_index = surfel_index;
    hit.u = u;
    hit.v = v;
    hit.depth = t;
    hit.weight = gaussian_weight(u, v);
    hit.world_point = splat_point(surfel, u, v);
    return hit;
}

struct AnisotropyStats {
    double mean_ratio = 0.0;
    double needle_fraction = 0.0;
};

/// Per-surfel ratio min(s)/max(s); "needle-like" means ratio < 0.1.
template <class T> AnisotropyStats anisotropy_stats(std::span<const Surfel<T>> surfels) {
    if (surfels.empty())
        throw DomainError("anisotropy_stats: empty surfel list");
    double sum = 0.0;
    std::size_t needles = 0;
    for (const auto &s : surfels) {
        const Vec2<T> sc = s.scale();
        const double ratio = double(std::min(sc[0], sc[1])) / double(std::max(sc[0], sc[1]));
        sum += ratio;
        if (ratio < 0.1)
            ++needles;
    }
    const double n = static_cast<double>(surfels.size());
    return {sum / n, static_cast<double>(needles) / n};
}

template <class T> AnisotropyStats anisotropy_stats(const std::vector<Surfel<T>> &surfels) {
    return anisotropy_stats(std::span<const Surfel<T>>(surfels));
}

} // namespace shelltex
