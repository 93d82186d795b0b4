// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace shelltex {

template <class T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <class T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <class T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T> using Mat4 = Eigen::Matrix<T, 4, 4>;

template <class T> inline T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

template <class T> inline T logit(T p) { return std::log(p / (T(1) - p)); }

/// Rotation matrix of the normalized quaternion q = (w, x, y, z).
template <class T> Mat3<T> quat_to_rotation(const Vec4<T> &q) {
    const Vec4<T> n = q / q.norm();
    const T w = n[0], x = n[1], y = n[2], z = n[3];
    Mat3<T> R;
    R << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
        T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
        T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
    return R;
}

/// Pulls a gradient on R = quat_to_rotation(q) back to the raw (unnormalized) q.
template <class T> Vec4<T> quat_to_rotation_backward(const Vec4<T> &q, const Mat3<T> &gR) {
    const T len = q.norm();
    const Vec4<T> n = q / len;
    const T w = n[0], x = n[1], y = n[2], z = n[3];
    Vec4<T> gn;
    gn[0] = T(2) * (-z * gR(0, 1) + y * gR(0, 2) + z * gR(1, 0) - x * gR(1, 2) - y * gR(2, 0) +
                    x * gR(2, 1));
    gn[1] = T(2) * (y * gR(0, 1) + z * gR(0, 2) + y * gR(1, 0) - T(2) * x * gR(1, 1) -
                    w * gR(1, 2) + z * gR(2, 0) + w * gR(2, 1) - T(2) * x * gR(2, 2));
    gn[2] = T(2) * (-T(2) * y * gR(0, 0) + x * gR(0, 1) + w * gR(0, 2) + x * gR(1, 0) +
                    z * gR(1, 2) - w * gR(2, 0) + z * gR(2, 1) - T(2) * y * gR(2, 2));
    gn[3] = T(2) * (-T(2) * z * gR(0, 0) - w * gR(0, 1) + x * gR(0, 2) + w * gR(1, 0) -
                    T(2) * z * gR(1, 1) + y * gR(1, 2) + x * gR(2, 0) + y * gR(2, 1));
    return (gn - n * n.dot(gn)) / len;
}

/// Gradient of normalize(v) pulled back to v.
template <class T> Vec3<T> normalize_backward(const Vec3<T> &v, const Vec3<T> &g) {
    const T len = v.norm();
    const Vec3<T> n = v / len;
    return (g - n * n.dot(g)) / len;
}

/// Deterministic helpers over a 64-bit Mersenne twister. The standard
/// distributions are implementation defined, these are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : mEngine(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(mEngine() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (mHasSpare) {
            mHasSpare = false;
            return mSpare;
        }
        double u1 = uniform();
        while (u1 <= 0.0)
            u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        mSpare = r * std::sin(a);
        mHasSpare = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : mEngine() % n; }

    std::uint64_t next() { return mEngine(); }

private:
    std::mt19937_64 mEngine;
    bool mHasSpare = false;
    double mSpare = 0.0;
};

} // namespace shelltex
