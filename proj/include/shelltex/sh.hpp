// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Real spherical-harmonic basis up to degree 3 (Condon-Shortley phase,
// orthonormal), with its Jacobian with respect to the direction.
//
#pragma once

#include "shelltex/core/math.hpp"

#include <array>

namespace shelltex {

inline constexpr int kMaxShDegree = 3;
inline constexpr int kShBasisSize = 16;

namespace sh_const {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr double C2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                 -1.0925484305920792, 0.5462742152960396};
inline constexpr double C3[7] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                 0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                                 -0.5900435899266435};
} // namespace sh_const

/// Evaluates the 16 basis functions (l <= 3) at direction d, ordered by l
/// then m = -l..l. Entries past sh_coeff_count(degree) are left untouched.
template <class T> void sh_basis(const Vec3<T> &d, int degree, T *out) {
    using namespace sh_const;
    const T x = d[0], y = d[1], z = d[2];
    out[0] = T(C0);
    if (degree < 1)
        return;
    out[1] = T(-C1) * y;
    out[2] = T(C1) * z;
    out[3] = T(-C1) * x;
    if (degree < 2)
        return;
    const T xx = x * x, yy = y * y, zz = z * z;
    out[4] = T(C2[0]) * x * y;
    out[5] = T(C2[1]) * y * z;
    out[6] = T(C2[2]) * (T(2) * zz - xx - yy);
    out[7] = T(C2[3]) * x * z;
    out[8] = T(C2[4]) * (xx - yy);
    if (degree < 3)
        return;
    out[9] = T(C3[0]) * y * (T(3) * xx - yy);
    out[10] = T(C3[1]) * x * y * z;
    out[11] = T(C3[2]) * y * (T(4) * zz - xx - yy);
    out[12] = T(C3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    out[13] = T(C3[4]) * x * (T(4) * zz - xx - yy);
    out[14] = T(C3[5]) * z * (xx - yy);
    out[15] = T(C3[6]) * x * (xx - T(3) * yy);
}

/// Polynomial gradient of each basis function; jac[k] = dY_k/d(x, y, z).
template <class T> void sh_basis_jacobian(const Vec3<T> &d, int degree, Vec3<T> *jac) {
    using namespace sh_const;
    const T x = d[0], y = d[1], z = d[2];
    jac[0] = Vec3<T>::Zero();
    if (degree < 1)
        return;
    jac[1] = Vec3<T>(T(0), T(-C1), T(0));
    jac[2] = Vec3<T>(T(0), T(0), T(C1));
    jac[3] = Vec3<T>(T(-C1), T(0), T(0));
    if (degree < 2)
        return;
    const T xx = x * x, yy = y * y, zz = z * z;
    jac[4] = T(C2[0]) * Vec3<T>(y, x, T(0));
    jac[5] = T(C2[1]) * Vec3<T>(T(0), z, y);
    jac[6] = T(C2[2]) * Vec3<T>(T(-2) * x, T(-2) * y, T(4) * z);
    jac[7] = T(C2[3]) * Vec3<T>(z, T(0), x);
    jac[8] = T(C2[4]) * Vec3<T>(T(2) * x, T(-2) * y, T(0));
    if (degree < 3)
        return;
    jac[9] = T(C3[0]) * Vec3<T>(T(6) * x * y, T(3) * xx - T(3) * yy, T(0));
    jac[10] = T(C3[1]) * Vec3<T>(y * z, x * z, x * y);
    jac[11] = T(C3[2]) * Vec3<T>(T(-2) * x * y, T(4) * zz - xx - T(3) * yy, T(8) * y * z);
    jac[12] = T(C3[3]) * Vec3<T>(T(-6) * x * z, T(-6) * y * z, T(6) * zz - T(3) * xx - T(3) * yy);
    jac[13] = T(C3[4]) * Vec3<T>(T(4) * zz - T(3) * xx - yy, T(-2) * x * y, T(8) * x * z);
    jac[14] = T(C3[5]) * Vec3<T>(T(2) * x * z, T(-2) * y * z, xx - yy);
    jac[15] = T(C3[6]) * Vec3<T>(T(3) * xx - T(3) * yy, T(-6) * x * y, T(0));
}

} // namespace shelltex
