// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Image quality metrics on [0, 1] images.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/losses.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace shelltex {

inline constexpr double kPsnrCap = 99.0;

/// -10 log10(MSE), capped at 99 dB.
template <class T> double psnr(std::span<const T> pred, std::span<const T> gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw DomainError("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred[i]) - double(gt[i]);
        mse += d * d;
    }
    mse /= double(pred.size());
    if (mse <= 0.0)
        return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

/// PSNR over the pixels whose mask entry is set (`channels` samples each).
template <class T>
double psnr_masked(std::span<const T> pred, std::span<const T> gt, std::span<const std::uint8_t> mask, int channels) {
    if (pred.size() != gt.size() || pred.size() != mask.size() * channels)
        throw DomainError("psnr_masked: shape mismatch");
    double mse = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if (!mask[p])
            continue;
        for (int c = 0; c < channels; ++c) {
            const double d = double(pred[p * channels + c]) - double(gt[p * channels + c]);
            mse += d * d;
            ++n;
        }
    }
    if (n == 0)
        throw DomainError("psnr_masked: empty mask");
    mse /= double(n);
    if (mse <= 0.0)
        return kPsnrCap;
    return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

/// Mean SSIM over channels (11x11 Gaussian window, sigma 1.5).
template <class T> double ssim_metric(std::span<const T> pred, std::span<const T> gt, int W, int H, int C) {
    std::vector<double> a(pred.begin(), pred.end()), b(gt.begin(), gt.end());
    return ssim<double>(a, b, W, H, C);
}

} // namespace shelltex
