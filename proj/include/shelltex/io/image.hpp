// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Float images and PNG read/write through libpng.
//
#pragma once

#include "shelltex/core/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

namespace shelltex {

/// Interleaved float image with values in [0, 1].
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f)
        : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

    float &at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
    float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
    bool empty() const { return data.empty(); }
    std::size_t pixels() const { return std::size_t(width) * height; }

    /// Channel subset [first, first + count).
    Image channels_slice(int first, int count) const {
        Image out(width, height, count);
        for (std::size_t i = 0; i < pixels(); ++i)
            for (int c = 0; c < count; ++c)
                out.data[i * count + c] = data[i * channels + first + c];
        return out;
    }
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE *f) const {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp, png_const_charp msg) { throw IoError(IoError::Kind::BadImage, msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}
} // namespace detail

/// Reads 8- or 16-bit gray/gray+alpha/RGB/RGBA (palettes expanded).
/// Values map to [0, 1] by the bit depth's maximum.
inline Image read_png(const std::string &path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp)
        throw IoError(IoError::Kind::MissingFile, "cannot open image: " + path);
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError(IoError::Kind::BadImage, "not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                             detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError(IoError::Kind::BadImage, "libpng initialization failed");
    }
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_tRNS_to_alpha(png);
    if (depth == 16)
        png_set_swap(png); // native little-endian 16-bit words
    png_read_update_info(png, info);

    Image img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = png_get_channels(png, info);
    const int out_depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> raw(rowbytes * img.height);
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = raw.data() + rowbytes * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    img.data.resize(img.pixels() * img.channels);
    if (out_depth == 16) {
        for (std::size_t i = 0; i < img.data.size(); ++i) {
            std::uint16_t v;
            std::memcpy(&v, raw.data() + i * 2, 2);
            img.data[i] = float(v) / 65535.0f;
        }
    } else {
        for (std::size_t i = 0; i < img.data.size(); ++i)
            img.data[i] = float(raw[i]) / 255.0f;
    }
    return img;
}

/// Writes 1-4 channel images, 8 or 16 bits per sample, values clamped to [0, 1].
inline void write_png(const std::string &path, const Image &img, int bit_depth = 8) {
    if (img.channels < 1 || img.channels > 4 || img.data.size() != img.pixels() * img.channels)
        throw IoError(IoError::Kind::BadImage, "write_png: malformed image");
    if (bit_depth != 8 && bit_depth != 16)
        throw IoError(IoError::Kind::BadImage, "write_png: bit depth must be 8 or 16");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp)
        throw IoError(IoError::Kind::WriteFailed, "cannot write image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_fn,
                                              detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError(IoError::Kind::WriteFailed, "libpng initialization failed");
    }
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};

    static const int kColor[5] = {0, PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA, PNG_COLOR_TYPE_RGB,
                                  PNG_COLOR_TYPE_RGBA};
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, bit_depth, kColor[img.channels], PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t row_samples = std::size_t(img.width) * img.channels;
    std::vector<unsigned char> row(row_samples * (bit_depth / 8));
    for (int y = 0; y < img.height; ++y) {
        for (std::size_t i = 0; i < row_samples; ++i) {
            const float v = std::clamp(img.data[y * row_samples + i], 0.0f, 1.0f);
            if (bit_depth == 8) {
                row[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
            } else {
                const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
                row[2 * i] = static_cast<unsigned char>(q >> 8); // PNG is big-endian
                row[2 * i + 1] = static_cast<unsigned char>(q & 0xff);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
}

/// Rounds every sample to the nearest 8-bit level.
inline Image quantize8(const Image &img) {
    Image out = img;
    for (auto &v : out.data)
        v = float(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
    return out;
}

} // namespace shelltex
