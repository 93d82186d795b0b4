// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Small fully connected decoder (ReLU hidden layers, sigmoid RGB output) with
// a hand-written reverse pass, plus per-surfel SH color evaluation.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/sh.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

namespace shelltex {

inline constexpr int kDirEncodingDim = kShBasisSize;

/// Degree-3 real SH basis of a unit view direction.
template <class T> std::array<T, kDirEncodingDim> encode_dir(const Vec3<T> &d) {
    if (std::abs(d.norm() - T(1)) > T(1e-6))
        throw DomainError("encode_dir: direction must be unit length");
    std::array<T, kDirEncodingDim> basis{};
    sh_basis(d, kMaxShDegree, basis.data());
    return basis;
}

template <class T> class Decoder {
public:
    using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

    Decoder() = default;

    /// dims = {input, hidden..., 3}. Parameters are zero.
    explicit Decoder(std::vector<int> dims) : mDims(std::move(dims)) {
        if (mDims.size() < 2 || mDims.back() != 3)
            throw ConfigError("decoder: dims must end with 3 outputs");
        for (int d : mDims)
            if (d <= 0)
                throw ConfigError("decoder: layer widths must be positive");
        std::size_t off = 0;
        for (std::size_t k = 0; k + 1 < mDims.size(); ++k) {
            mWeightOffset.push_back(off);
            off += std::size_t(mDims[k + 1]) * mDims[k];
            mBiasOffset.push_back(off);
            off += mDims[k + 1];
        }
        mParams.assign(off, T(0));
    }

    /// Feature input plus direction encoding, 2 x 64 ReLU hidden layers.
    static Decoder standard(int feature_dim, Rng &rng, int hidden = 64, int hidden_layers = 2) {
        std::vector<int> dims{feature_dim + kDirEncodingDim};
        for (int i = 0; i < hidden_layers; ++i)
            dims.push_back(hidden);
        dims.push_back(3);
        Decoder net(std::move(dims));
        net.init_uniform(rng);
        return net;
    }

    /// Kaiming-style uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
    void init_uniform(Rng &rng) {
        for (int k = 0; k < layer_count(); ++k) {
            const double bound = std::sqrt(6.0 / mDims[k]);
            T *w = mParams.data() + mWeightOffset[k];
            for (std::size_t i = 0, n = std::size_t(mDims[k + 1]) * mDims[k]; i < n; ++i)
                w[i] = T(rng.uniform(-bound, bound));
            std::fill_n(mParams.data() + mBiasOffset[k], mDims[k + 1], T(0));
        }
    }

    int input_dim() const { return mDims.front(); }
    int layer_count() const { return static_cast<int>(mDims.size()) - 1; }
    const std::vector<int> &dims() const { return mDims; }
    std::size_t param_count() const { return mParams.size(); }
    std::vector<T> &params() { return mParams; }
    const std::vector<T> &params() const { return mParams; }
    std::size_t weight_offset(int layer) const { return mWeightOffset[layer]; }
    std::size_t bias_offset(int layer) const { return mBiasOffset[layer]; }

    /// Activations kept from forward() for backward().
    struct Workspace {
        std::vector<Vec> act; // act[0] = input, act[k] = output of layer k (post-activation)
    };

    Vec3<T> forward(std::span<const T> input, Workspace &ws) const {
        const int L = layer_count();
        ws.act.resize(L + 1);
        ws.act[0] = Eigen::Map<const Vec>(input.data(), input.size());
        for (int k = 0; k < L; ++k) {
            Eigen::Map<const RowMat> W(mParams.data() + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<const Vec> b(mParams.data() + mBiasOffset[k], mDims[k + 1]);
            ws.act[k + 1].noalias() = W * ws.act[k];
            ws.act[k + 1] += b;
            if (k + 1 < L)
                ws.act[k + 1] = ws.act[k + 1].cwiseMax(T(0));
            else
                ws.act[k + 1] = ws.act[k + 1].unaryExpr([](T z) { return sigmoid(z); });
        }
        return Vec3<T>(ws.act[L][0], ws.act[L][1], ws.act[L][2]);
    }

    /// Accumulates parameter gradients into `param_grad` (size param_count())
    /// and writes the input gradient into `input_grad` when non-empty.
    void backward(const Workspace &ws, const Vec3<T> &upstream, T *param_grad, std::span<T> input_grad) const {
        const int L = layer_count();
        Vec delta(3);
        for (int c = 0; c < 3; ++c) {
            const T y = ws.act[L][c];
            delta[c] = upstream[c] * y * (T(1) - y);
        }
        for (int k = L - 1; k >= 0; --k) {
            Eigen::Map<const RowMat> W(mParams.data() + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<RowMat> gW(param_grad + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<Vec> gb(param_grad + mBiasOffset[k], mDims[k + 1]);
            gW.noalias() += delta * ws.act[k].transpose();
            gb += delta;
            if (k == 0 && input_grad.empty())
                break;
            Vec prev = W.transpose() * delta;
            if (k > 0) {
                for (int i = 0; i < mDims[k]; ++i)
                    if (!(ws.act[k][i] > T(0)))
                        prev[i] = T(0);
                delta = std::move(prev);
            } else {
                std::copy(prev.data(), prev.data() + mDims[0], input_grad.data());
            }
        }
    }

    using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

    /// Activations of a batch, one sample per column.
    struct BatchWorkspace {
        std::vector<ColMat> act;
    };

    /// Decodes every column of `input` (input_dim x n); returns 3 x n.
    const ColMat &forward_batch(const ColMat &input, BatchWorkspace &ws) const {
        const int L = layer_count();
        ws.act.resize(L + 1);
        ws.act[0] = input;
        for (int k = 0; k < L; ++k) {
            Eigen::Map<const RowMat> W(mParams.data() + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<const Vec> b(mParams.data() + mBiasOffset[k], mDims[k + 1]);
            ws.act[k + 1].noalias() = W * ws.act[k];
            ws.act[k + 1].colwise() += b;
            if (k + 1 < L)
                ws.act[k + 1] = ws.act[k + 1].cwiseMax(T(0));
            else
                ws.act[k + 1] = ws.act[k + 1].unaryExpr([](T z) { return sigmoid(z); });
        }
        return ws.act[L];
    }

    /// Batched backward; `upstream` is 3 x n. Parameter gradients accumulate
    /// into `param_grad`; `input_grad` (if given) receives input_dim x n.
    void backward_batch(const BatchWorkspace &ws, const ColMat &upstream, T *param_grad, ColMat *input_grad) const {
        const int L = layer_count();
        const ColMat &y = ws.act[L];
        ColMat delta = upstream.cwiseProduct(y.cwiseProduct((ColMat::Ones(y.rows(), y.cols()) - y)));
        for (int k = L - 1; k >= 0; --k) {
            Eigen::Map<const RowMat> W(mParams.data() + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<RowMat> gW(param_grad + mWeightOffset[k], mDims[k + 1], mDims[k]);
            Eigen::Map<Vec> gb(param_grad + mBiasOffset[k], mDims[k + 1]);
            gW.noalias() += delta * ws.act[k].transpose();
            gb += delta.rowwise().sum();
            if (k == 0 && !input_grad)
                break;
            ColMat prev = W.transpose() * delta;
            if (k > 0) {
                prev = (ws.act[k].array() > T(0)).select(prev, T(0));
                delta = std::move(prev);
            } else {
                *input_grad = std::move(prev);
            }
        }
    }

    template <class U> Decoder<U> cast() const {
        Decoder<U> out(mDims);
        std::copy(mParams.begin(), mParams.end(), out.params().begin());
        return out;
    }

private:
    std::vector<int> mDims;
    std::vector<std::size_t> mWeightOffset, mBiasOffset;
    std::vector<T> mParams;
};

namespace detail {
template <class T>
std::vector<T> decoder_input(std::span<const T> feature, const Vec3<T> &d, const Decoder<T> &net) {
    for (T v : feature)
        if (!std::isfinite(v))
            throw DomainError("decode: non-finite feature");
    if (static_cast<int>(feature.size()) + kDirEncodingDim != net.input_dim())
        throw DomainError("decode: feature length does not match decoder input");
    const auto dir = encode_dir(d);
    std::vector<T> in(feature.begin(), feature.end());
    in.insert(in.end(), dir.begin(), dir.end());
    return in;
}
} // namespace detail

template <class T> Vec3<T> decode(std::span<const T> feature, const Vec3<T> &d, const Decoder<T> &net) {
    const auto in = detail::decoder_input(feature, d, net);
    typename Decoder<T>::Workspace ws;
    return net.forward(in, ws);
}

template <class T> struct DecodeGrad {
    std::vector<T> net;
    std::vector<T> feature;
};

/// The direction encoding receives no gradient; view directions are not optimized.
template <class T>
DecodeGrad<T> decode_backward(std::span<const T> feature, const Vec3<T> &d, const Decoder<T> &net,
                              const Vec3<T> &upstream_rgb) {
    const auto in = detail::decoder_input(feature, d, net);
    typename Decoder<T>::Workspace ws;
    net.forward(in, ws);
    DecodeGrad<T> g;
    g.net.assign(net.param_count(), T(0));
    std::vector<T> gin(in.size(), T(0));
    net.backward(ws, upstream_rgb, g.net.data(), gin);
    g.feature.assign(gin.begin(), gin.begin() + feature.size());
    return g;
}

/// Stage-1 color: per channel clamp(sum_k c_k Y_k(d) + 0.5, 0, 1).
template <class T> Vec3<T> sh_eval(const Surfel<T> &surfel, const Vec3<T> &d, int degree) {
    if (degree < 0 || degree > kMaxShDegree || surfel.sh_degree() < degree)
        throw DomainError("sh_eval: surfel lacks coefficients for the requested degree");
    std::array<T, kShBasisSize> basis{};
    sh_basis(d, degree, basis.data());
    Vec3<T> rgb;
    for (int c = 0; c < 3; ++c) {
        T acc = T(0.5);
        for (int k = 0; k < sh_coeff_count(degree); ++k)
            acc += surfel.sh[k * 3 + c] * basis[k];
        rgb[c] = std::clamp(acc, T(0), T(1));
    }
    return rgb;
}

/// Reverse of sh_eval. Accumulates coefficient gradients into `sh_grad` and
/// returns the gradient with respect to the (unit) direction. Clamped
/// channels pass no gradient.
template <class T>
Vec3<T> sh_eval_backward(const Surfel<T> &surfel, const Vec3<T> &d, int degree, const Vec3<T> &upstream,
                         T *sh_grad) {
    std::array<T, kShBasisSize> basis{};
    std::array<Vec3<T>, kShBasisSize> jac;
    sh_basis(d, degree, basis.data());
    sh_basis_jacobian(d, degree, jac.data());
    const int K = sh_coeff_count(degree);
    Vec3<T> gd = Vec3<T>::Zero();
    for (int c = 0; c < 3; ++c) {
        T acc = T(0.5);
        for (int k = 0; k < K; ++k)
            acc += surfel.sh[k * 3 + c] * basis[k];
        if (acc < T(0) || acc > T(1) || upstream[c] == T(0))
            continue;
        for (int k = 0; k < K; ++k) {
            sh_grad[k * 3 + c] += upstream[c] * basis[k];
            gd += upstream[c] * surfel.sh[k * 3 + c] * jac[k];
        }
    }
    return gd;
}

} // namespace shelltex
