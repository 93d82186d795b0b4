// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Training losses with analytic gradients. Images are HWC float buffers.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/renderer.hpp"

#include <array>
#include <cmath>
#include <span>
#include <vector>

namespace shelltex {

template <class T> struct LossGrad {
    T value = T(0);
    std::vector<T> grad;
};

namespace detail {

inline constexpr int kSsimRadius = 5;

inline const std::array<double, 2 * kSsimRadius + 1> &ssim_kernel() {
    static const auto k = [] {
        std::array<double, 2 * kSsimRadius + 1> w{};
        double sum = 0.0;
        for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
            w[i + kSsimRadius] = std::exp(-double(i * i) / (2.0 * 1.5 * 1.5));
            sum += w[i + kSsimRadius];
        }
        for (auto &v : w)
            v /= sum;
        return w;
    }();
    return k;
}

/// Separable Gaussian blur of one W x H plane, zero padding, same size.
/// The kernel is symmetric, so this is also its own adjoint.
template <class T> std::vector<T> gaussian_blur(const std::vector<T> &src, int W, int H) {
    const auto &k = ssim_kernel();
    std::vector<T> tmp(src.size(), T(0)), out(src.size(), T(0));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            T acc = T(0);
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int xx = x + d;
                if (xx >= 0 && xx < W)
                    acc += T(k[d + kSsimRadius]) * src[y * W + xx];
            }
            tmp[y * W + x] = acc;
        }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            T acc = T(0);
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int yy = y + d;
                if (yy >= 0 && yy < H)
                    acc += T(k[d + kSsimRadius]) * tmp[yy * W + x];
            }
            out[y * W + x] = acc;
        }
    return out;
}

inline void check_shape(std::size_t a, std::size_t b, std::size_t expect, const char *what) {
    if (a != b || a != expect)
        throw DomainError(std::string(what) + ": shape mismatch");
}

} // namespace detail

/// Mean SSIM over pixels and channels of two HWC images; optionally the
/// gradient with respect to `pred`.
template <class T>
T ssim(std::span<const T> pred, std::span<const T> gt, int W, int H, int C, std::vector<T> *grad = nullptr) {
    detail::check_shape(pred.size(), gt.size(), std::size_t(W) * H * C, "ssim");
    const T C1 = T(0.01 * 0.01), C2 = T(0.03 * 0.03);
    const std::size_t P = std::size_t(W) * H;
    const T inv_n = T(1) / T(P * C);
    if (grad)
        grad->assign(P * C, T(0));
    T total = T(0);
    std::vector<T> x(P), y(P), xx(P), yy(P), xy(P);
    for (int c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < P; ++i) {
            x[i] = pred[i * C + c];
            y[i] = gt[i * C + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = detail::gaussian_blur(x, W, H), my = detail::gaussian_blur(y, W, H);
        const auto exx = detail::gaussian_blur(xx, W, H), eyy = detail::gaussian_blur(yy, W, H);
        const auto exy = detail::gaussian_blur(xy, W, H);
        std::vector<T> dm, de2, dexy;
        if (grad) {
            dm.assign(P, T(0));
            de2.assign(P, T(0));
            dexy.assign(P, T(0));
        }
        for (std::size_t i = 0; i < P; ++i) {
            const T sx = exx[i] - mx[i] * mx[i];
            const T sy = eyy[i] - my[i] * my[i];
            const T sxy = exy[i] - mx[i] * my[i];
            const T n1 = T(2) * mx[i] * my[i] + C1, n2 = T(2) * sxy + C2;
            const T d1 = mx[i] * mx[i] + my[i] * my[i] + C1, d2 = sx + sy + C2;
            const T s = n1 * n2 / (d1 * d2);
            total += s;
            if (grad) {
                const T ds_dmx = s * (T(2) * my[i] / n1 - T(2) * mx[i] / d1);
                const T ds_dsx = -s / d2;
                const T ds_dsxy = T(2) * s / n2;
                dm[i] = (ds_dmx - T(2) * mx[i] * ds_dsx - my[i] * ds_dsxy) * inv_n;
                de2[i] = ds_dsx * inv_n;
                dexy[i] = ds_dsxy * inv_n;
            }
        }
        if (grad) {
            const auto bm = detail::gaussian_blur(dm, W, H);
            const auto be2 = detail::gaussian_blur(de2, W, H);
            const auto bxy = detail::gaussian_blur(dexy, W, H);
            for (std::size_t i = 0; i < P; ++i)
                (*grad)[i * C + c] = bm[i] + T(2) * x[i] * be2[i] + y[i] * bxy[i];
        }
    }
    return total * inv_n;
}

/// (1 - w) * L1 + w * (1 - SSIM) / 2.
template <class T>
LossGrad<T> loss_rgb(std::span<const T> pred, std::span<const T> gt, int W, int H, double ssim_weight = 0.2) {
    detail::check_shape(pred.size(), gt.size(), std::size_t(W) * H * 3, "loss_rgb");
    LossGrad<T> out;
    const T w = T(ssim_weight);
    const T inv_n = T(1) / T(pred.size());
    out.grad.assign(pred.size(), T(0));
    T l1 = T(0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred[i] - gt[i];
        l1 += std::abs(d);
        out.grad[i] = (T(1) - w) * inv_n * T((d > T(0)) - (d < T(0)));
    }
    out.value = (T(1) - w) * l1 * inv_n;
    if (w > T(0)) {
        std::vector<T> gs;
        const T s = ssim(pred, gt, W, H, 3, &gs);
        out.value += w * (T(1) - s) / T(2);
        for (std::size_t i = 0; i < pred.size(); ++i)
            out.grad[i] -= w / T(2) * gs[i];
    }
    return out;
}

/// How hit depths enter the distortion loss. The default is the plain form
/// sum_{i<j} w_i w_j |t_i - t_j|. `mapped` replaces t by the normalized depth
/// m(t) = far / (far - near) * (1 - near / t); `squared` penalizes (m_i - m_j)^2.
struct DistortionForm {
    bool mapped = false;
    bool squared = false;
    double near = 0.2, far = 100.0;

    /// Normalized squared form; the weight 1000 is calibrated for it.
    static DistortionForm normalized() { return {true, true, 0.2, 100.0}; }
};

/// Depth distortion, averaged over pixels. Gradients land on the per-hit
/// blend weight and depth.
template <class T>
T loss_distortion(const RenderOutput<T> &r, HitGrads<T> *grads = nullptr, const DistortionForm &form = {}) {
    if (!r.has_aux)
        throw StateError("loss_distortion: render kept no aux data");
    const int P = r.width * r.height;
    const T inv_p = T(1) / T(P);
    if (grads) {
        grads->weight.assign(r.hits.size(), T(0));
        grads->depth.assign(r.hits.size(), T(0));
    }
    const T scale = T(form.far / (form.far - form.near)), near = T(form.near);
    auto map = [&](T t) { return form.mapped ? scale * (T(1) - near / t) : t; };
    auto dmap = [&](T t) { return form.mapped ? scale * near / (t * t) : T(1); };
    std::vector<T> m, dm;
    T total = T(0);
    for (int pix = 0; pix < P; ++pix) {
        const std::size_t b = r.pixel_offsets[pix], n = r.pixel_count[pix];
        m.resize(n);
        dm.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = map(r.hits[b + i].t);
            dm[i] = dmap(r.hits[b + i].t);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto &hi = r.hits[b + i];
            const T wi = hi.transmittance * hi.alpha_eff;
            for (std::size_t j = i + 1; j < n; ++j) {
                const auto &hj = r.hits[b + j];
                const T wj = hj.transmittance * hj.alpha_eff;
                const T dt = m[i] - m[j];
                const T pen = form.squared ? dt * dt : std::abs(dt);
                total += wi * wj * pen;
                if (grads) {
                    const T dpen = form.squared ? T(2) * dt : T((dt > T(0)) - (dt < T(0)));
                    grads->weight[b + i] += wj * pen * inv_p;
                    grads->weight[b + j] += wi * pen * inv_p;
                    grads->depth[b + i] += wi * wj * dpen * dm[i] * inv_p;
                    grads->depth[b + j] -= wi * wj * dpen * dm[j] * inv_p;
                }
            }
        }
    }
    return total * inv_p;
}

/// Normal consistency between the blended normal map and normals derived
/// from the depth map. A pixel counts when it and its four neighbours have
/// alpha > 0.5.
template <class T> struct NormalLoss {
    T value = T(0);
    std::vector<T> grad_normal, grad_depth;
    int covered = 0;
};

namespace detail {
template <class T> Vec3<T> safe_normalize(const Vec3<T> &v) { return v / std::max(v.norm(), T(1e-8)); }

template <class T> Vec3<T> safe_normalize_backward(const Vec3<T> &v, const Vec3<T> &g) {
    const T len = v.norm();
    if (len < T(1e-8))
        return g / T(1e-8);
    return normalize_backward(v, g);
}
} // namespace detail

template <class T>
NormalLoss<T> loss_normal(std::span<const T> normal, std::span<const T> depth, std::span<const T> alpha,
                          const Camera &camera) {
    const int W = camera.width, H = camera.height;
    const std::size_t P = std::size_t(W) * H;
    if (normal.size() != P * 3 || depth.size() != P || alpha.size() != P)
        throw DomainError("loss_normal: shape mismatch");
    NormalLoss<T> out;
    out.grad_normal.assign(P * 3, T(0));
    out.grad_depth.assign(P, T(0));
    const Vec3<T> o = camera.origin().template cast<T>();
    auto dir = [&](int x, int y) { return Vec3<T>(camera.pixel_ray(x, y).template cast<T>()); };
    auto point = [&](int x, int y) { return Vec3<T>(o + depth[y * W + x] * dir(x, y)); };
    auto covered = [&](int x, int y) {
        if (x < 1 || y < 1 || x >= W - 1 || y >= H - 1)
            return false;
        return alpha[y * W + x] > T(0.5) && alpha[y * W + x - 1] > T(0.5) && alpha[y * W + x + 1] > T(0.5) &&
               alpha[(y - 1) * W + x] > T(0.5) && alpha[(y + 1) * W + x] > T(0.5);
    };
    std::vector<int> pixels;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (covered(x, y))
                pixels.push_back(y * W + x);
    out.covered = static_cast<int>(pixels.size());
    if (pixels.empty())
        return out;
    const T inv = T(1) / T(pixels.size());
    T total = T(0);
    for (int pix : pixels) {
        const int x = pix % W, y = pix / W;
        const Vec3<T> a = point(x + 1, y) - point(x - 1, y);
        const Vec3<T> b = point(x, y + 1) - point(x, y - 1);
        const Vec3<T> raw = a.cross(b);
        const T flip = raw.dot(dir(x, y)) > T(0) ? T(-1) : T(1);
        const Vec3<T> c = flip * raw;
        const Vec3<T> nd = detail::safe_normalize(c);
        const Vec3<T> nr(normal[pix * 3], normal[pix * 3 + 1], normal[pix * 3 + 2]);
        const Vec3<T> nb = detail::safe_normalize(nr);
        total += T(1) - nb.dot(nd);

        const Vec3<T> g_nr = detail::safe_normalize_backward(nr, Vec3<T>(-inv * nd));
        for (int k = 0; k < 3; ++k)
            out.grad_normal[pix * 3 + k] += g_nr[k];
        const Vec3<T> g_c = flip * detail::safe_normalize_backward(c, Vec3<T>(-inv * nb));
        const Vec3<T> g_a = b.cross(g_c), g_b = g_c.cross(a);
        out.grad_depth[y * W + x + 1] += g_a.dot(dir(x + 1, y));
        out.grad_depth[y * W + x - 1] -= g_a.dot(dir(x - 1, y));
        out.grad_depth[(y + 1) * W + x] += g_b.dot(dir(x, y + 1));
        out.grad_depth[(y - 1) * W + x] -= g_b.dot(dir(x, y - 1));
    }
    out.value = total * inv;
    return out;
}

/// Mean absolute alpha difference.
template <class T> LossGrad<T> loss_alpha(std::span<const T> pred, std::span<const T> target) {
    if (pred.size() != target.size())
        throw DomainError("loss_alpha: shape mismatch");
    LossGrad<T> out;
    out.grad.assign(pred.size(), T(0));
    if (pred.empty())
        return out;
    const T inv = T(1) / T(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred[i] - target[i];
        out.value += std::abs(d);
        out.grad[i] = inv * T((d > T(0)) - (d < T(0)));
    }
    out.value *= inv;
    return out;
}

struct LossWeights {
    double ssim_weight = 0.2;
    double distortion = 1000.0;
    double normal = 0.05;
    double alpha = 0.1;
};

struct LossTerms {
    double rgb = 0.0, distortion = 0.0, normal = 0.0, alpha = 0.0;
};

inline double total_loss(const LossTerms &t, const LossWeights &w) {
    return t.rgb + w.distortion * t.distortion + w.normal * t.normal + w.alpha * t.alpha;
}

} // namespace shelltex
