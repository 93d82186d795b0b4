// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// CPU ray-splat rasterizer. Surfels are sorted by camera depth, binned into
// screen tiles, intersected exactly per pixel and alpha-composited front to
// back. In shell mode the composited quantity is the hash-field feature of
// every hit point and the decoder runs once per pixel on the blended
// feature image; in sh mode each surfel carries its own SH color.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/core/parallel.hpp"
#include "shelltex/decoder.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/hashfield.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace shelltex {

enum class RenderMode { Sh, Shell };

/// Everything a render needs besides the camera.
template <class T> struct Scene {
    std::vector<Surfel<T>> surfels;
    int sh_degree = -1; // degree used by sh mode
    std::optional<HashField<T>> field;
    std::optional<Decoder<T>> decoder;
    AnnealState anneal;
    Vec3<T> background = Vec3<T>::Zero();
    bool contract = false; // contract hit points before querying the field

    template <class U> Scene<U> cast() const {
        Scene<U> s;
        s.surfels.reserve(surfels.size());
        for (const auto &x : surfels)
            s.surfels.push_back(x.template cast<U>());
        s.sh_degree = sh_degree;
        if (field)
            s.field = field->template cast<U>();
        if (decoder)
            s.decoder = decoder->template cast<U>();
        s.anneal = anneal;
        s.background = background.template cast<U>();
        s.contract = contract;
        return s;
    }
};

struct RenderOptions {
    SplatLimits limits;
    double transmittance_cutoff = 1e-4;
    double lowpass_sigma = 0.3; // pixels
    int tile_size = 16;
};

/// Per-view data of one surfel.
template <class T> struct ProjectedSplat {
    Vec3<T> p;
    Mat3<T> R;
    Vec2<T> s;
    T alpha = T(0);
    T depth = T(0);        // camera-space z of the center
    T px = T(0), py = T(0); // center projection, pixels
    int x0 = 0, y0 = 0, x1 = -1, y1 = -1; // inclusive pixel bounds
    bool visible = false;
    Vec3<T> color = Vec3<T>::Zero(); // sh mode only
};

template <class T> struct Hit {
    int surfel = -1;
    int local = -1; // position in the owning tile's splat list
    T u = T(0), v = T(0), t = T(0);
    T g = T(0);        // Gaussian falloff at (u, v)
    T g_screen = T(0); // screen-space low-pass weight
    T weight = T(0);   // max(g, g_screen)
    T alpha_eff = T(0);
    T transmittance = T(1); // before this hit
    Vec3<T> point = Vec3<T>::Zero();
    T normal_sign = T(1); // camera-facing normal = normal_sign * R.col(2)
    bool screen_branch = false;
};

/// Per-pixel blended outputs.
template <class T> struct Blend {
    std::vector<T> value;
    T alpha = T(0);
    T depth_raw = T(0);
    T depth = T(0);
    Vec3<T> normal = Vec3<T>::Zero();
    T final_transmittance = T(1);
};

/// Front-to-back compositing of `hits` carrying `dim` values each. The hits'
/// transmittance fields are recomputed and written back.
template <class T>
Blend<T> blend_front_to_back(std::span<Hit<T>> hits, std::span<const T> values, int dim,
                             std::span<const ProjectedSplat<T>> splats = {}) {
    Blend<T> b;
    b.value.assign(dim, T(0));
    T trans = T(1);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        auto &h = hits[i];
        h.transmittance = trans;
        const T w = trans * h.alpha_eff;
        for (int k = 0; k < dim; ++k)
            b.value[k] += w * values[i * dim + k];
        b.alpha += w;
        b.depth_raw += w * h.t;
        if (!splats.empty())
            b.normal += w * h.normal_sign * splats[h.surfel].R.col(2);
        trans *= T(1) - h.alpha_eff;
    }
    b.final_transmittance = trans;
    b.depth = b.depth_raw / std::max(b.alpha, T(1e-8));
    return b;
}

/// Projects every surfel into `camera`: rotation, pixel bounds of the 3-sigma
/// rectangle, center depth.
template <class T>
std::vector<ProjectedSplat<T>> project_splats(const std::vector<Surfel<T>> &surfels, const Camera &camera,
                                              const RenderOptions &opt = {}) {
    std::vector<ProjectedSplat<T>> out(surfels.size());
    const double cut = opt.limits.sigma_cutoff;
    const double lowpass = cut * opt.lowpass_sigma;
    for (std::size_t i = 0; i < surfels.size(); ++i) {
        const auto &sf = surfels[i];
        auto &ps = out[i];
        ps.p = sf.position;
        ps.R = sf.rotation_matrix();
        ps.s = sf.scale();
        ps.alpha = sf.opacity();
        const Eigen::Vector3d pc = camera.to_camera(ps.p.template cast<double>());
        ps.depth = T(pc.z());
        if (!(pc.z() > opt.limits.near_clip))
            continue;
        ps.px = T(camera.fx * pc.x() / pc.z() + camera.cx);
        ps.py = T(camera.fy * pc.y() / pc.z() + camera.cy);
        double minx = double(ps.px) - lowpass, maxx = double(ps.px) + lowpass;
        double miny = double(ps.py) - lowpass, maxy = double(ps.py) + lowpass;
        bool whole = false;
        for (int c = 0; c < 4; ++c) {
            const double a = (c & 1) ? cut : -cut;
            const double b = (c & 2) ? cut : -cut;
            const Eigen::Vector3d corner = (ps.p + T(a) * ps.s[0] * ps.R.col(0) + T(b) * ps.s[1] * ps.R.col(1))
                                               .template cast<double>();
            const Eigen::Vector3d cc = camera.to_camera(corner);
            if (!(cc.z() > opt.limits.near_clip)) {
                whole = true;
                break;
            }
            const double qx = camera.fx * cc.x() / cc.z() + camera.cx;
            const double qy = camera.fy * cc.y() / cc.z() + camera.cy;
            minx = std::min(minx, qx);
            maxx = std::max(maxx, qx);
            miny = std::min(miny, qy);
            maxy = std::max(maxy, qy);
        }
        if (whole) {
            minx = miny = -1e30;
            maxx = maxy = 1e30;
        }
        const double fx0 = std::max(std::floor(minx - 0.5), -1.0);
        const double fy0 = std::max(std::floor(miny - 0.5), -1.0);
        const double fx1 = std::min(std::ceil(maxx - 0.5), double(camera.width));
        const double fy1 = std::min(std::ceil(maxy - 0.5), double(camera.height));
        ps.x0 = std::max(0, int(fx0));
        ps.y0 = std::max(0, int(fy0));
        ps.x1 = std::min(camera.width - 1, int(fx1));
        ps.y1 = std::min(camera.height - 1, int(fy1));
        ps.visible = ps.x0 <= ps.x1 && ps.y0 <= ps.y1;
    }
    return out;
}

/// Visible splat indices sorted front to back by center depth, ties by index.
template <class T> std::vector<int> depth_order(std::span<const ProjectedSplat<T>> splats) {
    std::vector<int> order;
    for (std::size_t i = 0; i < splats.size(); ++i)
        if (splats[i].visible)
            order.push_back(static_cast<int>(i));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (splats[a].depth != splats[b].depth)
            return splats[a].depth < splats[b].depth;
        return a < b;
    });
    return order;
}

/// Ordered hit list of the pixel (x, y) over the candidates in `order`
/// (front-to-back). Stops once transmittance drops below the cutoff.
template <class T>
std::vector<Hit<T>> visible_hits(int x, int y, std::span<const ProjectedSplat<T>> splats,
                                 std::span<const int> order, const Camera &camera, const RenderOptions &opt = {}) {
    std::vector<Hit<T>> hits;
    const Vec3<T> origin = camera.origin().template cast<T>();
    const Vec3<T> dir = camera.pixel_ray(x, y).template cast<T>();
    const T cut2 = T(opt.limits.sigma_cutoff * opt.limits.sigma_cutoff);
    const T inv2var = T(0.5 / (opt.lowpass_sigma * opt.lowpass_sigma));
    const T pxc = T(x + 0.5), pyc = T(y + 0.5);
    T trans = T(1);
    for (std::size_t k = 0; k < order.size(); ++k) {
        const int idx = order[k];
        const auto &ps = splats[idx];
        if (x < ps.x0 || x > ps.x1 || y < ps.y0 || y > ps.y1)
            continue;
        Hit<T> h;
        if (!detail::intersect_plane(origin, dir, ps.p, ps.R, ps.s, opt.limits, h.u, h.v, h.t))
            continue;
        const T r2 = h.u * h.u + h.v * h.v;
        const T dx = ps.px - pxc, dy = ps.py - pyc;
        const T d2 = (dx * dx + dy * dy) * inv2var * T(2); // in units of sigma^2
        if (r2 > cut2 && d2 > cut2)
            continue;
        h.surfel = idx;
        h.local = static_cast<int>(k);
        h.g = std::exp(-r2 / T(2));
        h.g_screen = std::exp(-d2 / T(2));
        h.screen_branch = h.g_screen > h.g;
        h.weight = h.screen_branch ? h.g_screen : h.g;
        h.alpha_eff = ps.alpha * h.weight;
        h.point = ps.p + h.u * ps.s[0] * ps.R.col(0) + h.v * ps.s[1] * ps.R.col(1);
        h.normal_sign = dir.dot(ps.R.col(2)) > T(0) ? T(-1) : T(1);
        h.transmittance = trans;
        hits.push_back(h);
        trans *= T(1) - h.alpha_eff;
        if (trans < T(opt.transmittance_cutoff))
            break;
    }
    return hits;
}

/// Point at which the field is sampled for a world-space hit point.
template <class T> Vec3<T> field_query_point(const Vec3<T> &x, const HashField<T> &field, bool contract_space) {
    if (contract_space)
        return contract(x);
    Vec3<T> q;
    for (int a = 0; a < 3; ++a)
        q[a] = std::clamp(x[a], -field.bound, field.bound);
    return q;
}

template <class T>
Vec3<T> field_query_backward(const Vec3<T> &x, const HashField<T> &field, bool contract_space, const Vec3<T> &g) {
    if (contract_space)
        return contract_backward(x, g);
    Vec3<T> out = g;
    for (int a = 0; a < 3; ++a)
        if (std::abs(x[a]) > field.bound)
            out[a] = T(0);
    return out;
}

/// Blended feature image pixel: F = sum_i T_i a_i g_i f(q(p_i)).
template <class T>
Blend<T> composite_features(std::span<Hit<T>> hits, const HashField<T> &field, const AnnealState &anneal,
                            bool contract_space = false, std::span<const ProjectedSplat<T>> splats = {}) {
    const int dim = field.output_dim();
    std::vector<T> values(hits.size() * dim);
    for (std::size_t i = 0; i < hits.size(); ++i)
        encode(field_query_point(hits[i].point, field, contract_space), field, anneal,
               std::span<T>(values.data() + i * dim, dim));
    return blend_front_to_back<T>(hits, values, dim, splats);
}

/// Blended SH colors; each splat is shaded along its center direction from `origin`.
template <class T>
Blend<T> composite_sh(std::span<Hit<T>> hits, const std::vector<Surfel<T>> &surfels, const Vec3<T> &origin,
                      int degree, std::span<const ProjectedSplat<T>> splats = {}) {
    std::vector<T> values(hits.size() * 3);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        const auto &sf = surfels[hits[i].surfel];
        const Vec3<T> c = sh_eval(sf, Vec3<T>((sf.position - origin).normalized()), degree);
        for (int k = 0; k < 3; ++k)
            values[i * 3 + k] = c[k];
    }
    return blend_front_to_back<T>(hits, values, 3, splats);
}

namespace detail {
/// Writes [feature, encode_dir(ray)] into column `col` of a decoder batch.
template <class T>
void decoder_column(typename Decoder<T>::ColMat &m, int col, const T *feature, int dim, const Eigen::Vector3d &ray) {
    for (int k = 0; k < dim; ++k)
        m(k, col) = feature[k];
    const auto enc = encode_dir(Vec3<T>(ray.template cast<T>()));
    for (int k = 0; k < kDirEncodingDim; ++k)
        m(dim + k, col) = enc[k];
}
} // namespace detail

/// Image outputs plus everything the reverse pass needs.
template <class T> struct RenderOutput {
    RenderMode mode = RenderMode::Shell;
    int width = 0, height = 0;
    // Rendered image (HWC).
    std::vector<T> rgb, alpha, depth, normal;
    // Feature image (shell mode): blended features and decoded color before
    // background compositing.
    int feature_dim = 0;
    std::vector<T> features, decoded;
    std::vector<T> depth_raw;
    // Aux for the backward pass.
    bool has_aux = false;
    std::vector<ProjectedSplat<T>> splats;
    int tile_size = 16, tiles_x = 0, tiles_y = 0;
    std::vector<int> tile_splats;            // concatenated depth-ordered lists
    std::vector<std::size_t> tile_offsets;   // tiles + 1
    std::vector<Hit<T>> hits;                // grouped by tile, then pixel
    std::vector<std::size_t> pixel_offsets;  // per pixel [begin, end) into hits
    std::vector<std::uint32_t> pixel_count;
    std::vector<T> hit_values;               // value_dim per hit
    int value_dim = 0;

    std::span<const Hit<T>> pixel_hits(int pixel) const {
        return {hits.data() + pixel_offsets[pixel], pixel_count[pixel]};
    }
};

template <class T>
RenderOutput<T> render(const Scene<T> &scene, const Camera &camera, RenderMode mode, const RenderOptions &opt = {},
                       bool keep_aux = true) {
    camera.validate(1e-4);
    if (mode == RenderMode::Shell && (!scene.field || !scene.decoder))
        throw ConfigError("render: shell mode requires a hash field and a decoder");
    if (mode == RenderMode::Shell && scene.decoder->input_dim() != scene.field->output_dim() + kDirEncodingDim)
        throw ConfigError("render: decoder input does not match field output");
    if (mode == RenderMode::Sh) {
        if (scene.sh_degree < 0)
            throw ConfigError("render: sh mode requires SH coefficients");
        for (const auto &s : scene.surfels)
            if (s.sh_degree() < scene.sh_degree)
                throw ConfigError("render: surfel lacks SH coefficients for sh mode");
    }

    RenderOutput<T> out;
    out.mode = mode;
    const int W = camera.width, H = camera.height, HW = W * H;
    out.width = W;
    out.height = H;
    out.rgb.assign(std::size_t(HW) * 3, T(0));
    out.alpha.assign(HW, T(0));
    out.depth.assign(HW, T(0));
    out.depth_raw.assign(HW, T(0));
    out.normal.assign(std::size_t(HW) * 3, T(0));

    out.splats = project_splats(scene.surfels, camera, opt);
    const Vec3<T> origin = camera.origin().template cast<T>();
    if (mode == RenderMode::Sh) {
        for (std::size_t i = 0; i < out.splats.size(); ++i) {
            auto &ps = out.splats[i];
            if (ps.visible)
                ps.color = sh_eval(scene.surfels[i], Vec3<T>((ps.p - origin).normalized()), scene.sh_degree);
        }
    }
    const std::vector<int> order = depth_order<T>(out.splats);

    // Tile binning.
    const int ts = std::max(1, opt.tile_size);
    out.tile_size = ts;
    out.tiles_x = (W + ts - 1) / ts;
    out.tiles_y = (H + ts - 1) / ts;
    const int ntiles = out.tiles_x * out.tiles_y;
    {
        std::vector<std::vector<int>> lists(ntiles);
        for (int idx : order) {
            const auto &ps = out.splats[idx];
            for (int ty = ps.y0 / ts; ty <= ps.y1 / ts; ++ty)
                for (int tx = ps.x0 / ts; tx <= ps.x1 / ts; ++tx)
                    lists[ty * out.tiles_x + tx].push_back(idx);
        }
        out.tile_offsets.assign(ntiles + 1, 0);
        for (int t = 0; t < ntiles; ++t)
            out.tile_offsets[t + 1] = out.tile_offsets[t] + lists[t].size();
        out.tile_splats.reserve(out.tile_offsets.back());
        for (auto &l : lists)
            out.tile_splats.insert(out.tile_splats.end(), l.begin(), l.end());
    }

    const int dim = mode == RenderMode::Shell ? scene.field->output_dim() : 3;
    out.value_dim = dim;
    if (mode == RenderMode::Shell) {
        out.feature_dim = dim;
        out.features.assign(std::size_t(HW) * dim, T(0));
        out.decoded.assign(std::size_t(HW) * 3, T(0));
    }

    struct TileResult {
        std::vector<Hit<T>> hits;
        std::vector<T> values;
    };
    std::vector<TileResult> tiles(ntiles);
    std::vector<std::uint32_t> pixel_count(HW, 0);
    std::vector<std::size_t> pixel_local_begin(HW, 0);

    parallel_for(std::size_t(ntiles), [&](std::size_t tile) {
        const int tx = int(tile) % out.tiles_x, ty = int(tile) / out.tiles_x;
        const std::span<const int> list(out.tile_splats.data() + out.tile_offsets[tile],
                                        out.tile_offsets[tile + 1] - out.tile_offsets[tile]);
        auto &tr = tiles[tile];
        const int x0 = tx * ts, y0 = ty * ts;
        const int tw = std::min(W, x0 + ts) - x0, th = std::min(H, y0 + ts) - y0;
        typename Decoder<T>::ColMat input;
        if (mode == RenderMode::Shell)
            input.resize(scene.decoder->input_dim(), tw * th);
        for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(W, (tx + 1) * ts); ++x) {
                const int pix = y * W + x;
                auto hits = visible_hits<T>(x, y, out.splats, list, camera, opt);
                const std::size_t begin = tr.hits.size();
                tr.values.resize((begin + hits.size()) * dim);
                T *vals = tr.values.data() + begin * dim;
                for (std::size_t i = 0; i < hits.size(); ++i) {
                    if (mode == RenderMode::Shell) {
                        encode(field_query_point(hits[i].point, *scene.field, scene.contract), *scene.field,
                               scene.anneal, std::span<T>(vals + i * dim, dim));
                    } else {
                        const Vec3<T> &c = out.splats[hits[i].surfel].color;
                        for (int k = 0; k < 3; ++k)
                            vals[i * 3 + k] = c[k];
                    }
                }
                const Blend<T> b = blend_front_to_back<T>(hits, std::span<const T>(vals, hits.size() * dim), dim,
                                                          out.splats);
                out.alpha[pix] = b.alpha;
                out.depth[pix] = b.depth;
                out.depth_raw[pix] = b.depth_raw;
                for (int k = 0; k < 3; ++k)
                    out.normal[pix * 3 + k] = b.normal[k];
                if (mode == RenderMode::Shell) {
                    std::copy(b.value.begin(), b.value.end(), out.features.begin() + std::size_t(pix) * dim);
                    const int col = (y - y0) * tw + (x - x0);
                    detail::decoder_column(input, col, b.value.data(), dim, camera.pixel_ray(x, y));
                } else {
                    for (int k = 0; k < 3; ++k)
                        out.rgb[pix * 3 + k] = b.value[k] + (T(1) - b.alpha) * scene.background[k];
                }
                pixel_local_begin[pix] = begin;
                pixel_count[pix] = static_cast<std::uint32_t>(hits.size());
                tr.hits.insert(tr.hits.end(), hits.begin(), hits.end());
            }
        }
        if (mode == RenderMode::Shell) {
            typename Decoder<T>::BatchWorkspace ws;
            const auto &c = scene.decoder->forward_batch(input, ws);
            for (int y = y0; y < y0 + th; ++y)
                for (int x = x0; x < x0 + tw; ++x) {
                    const int pix = y * W + x, col = (y - y0) * tw + (x - x0);
                    const T a = out.alpha[pix];
                    for (int k = 0; k < 3; ++k) {
                        out.decoded[pix * 3 + k] = c(k, col);
                        out.rgb[pix * 3 + k] = a * c(k, col) + (T(1) - a) * scene.background[k];
                    }
                }
        }
    });

    if (keep_aux) {
        std::vector<std::size_t> tile_base(ntiles + 1, 0);
        for (int t = 0; t < ntiles; ++t)
            tile_base[t + 1] = tile_base[t] + tiles[t].hits.size();
        out.hits.reserve(tile_base.back());
        out.hit_values.reserve(tile_base.back() * dim);
        for (auto &tr : tiles) {
            out.hits.insert(out.hits.end(), tr.hits.begin(), tr.hits.end());
            out.hit_values.insert(out.hit_values.end(), tr.values.begin(), tr.values.end());
        }
        out.pixel_offsets.assign(HW, 0);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int pix = y * W + x;
                const int tile = (y / ts) * out.tiles_x + x / ts;
                out.pixel_offsets[pix] = tile_base[tile] + pixel_local_begin[pix];
            }
        out.pixel_count = std::move(pixel_count);
        out.has_aux = true;
    }
    return out;
}

/// Upstream gradients on the rendered image. Empty vectors mean zero.
template <class T> struct PixelGrads {
    std::vector<T> rgb, alpha, depth, normal;
};

/// Extra per-hit gradients on the blend weight and hit depth (e.g. from the
/// distortion loss), aligned with RenderOutput::hits. Empty means zero.
template <class T> struct HitGrads {
    std::vector<T> weight, depth;
};

struct BackwardOptions {
    /// Propagate d(feature)/d(hit point) into surfel geometry. Disabling it
    /// leaves table and decoder gradients unchanged.
    bool feature_pos_grad = true;
};

/// Parameter gradients of one view.
template <class T> struct SceneGrads {
    int stride = Surfel<T>::kGeometryParams;
    std::vector<T> surfels; // stride per surfel, layout of Surfel::write_params
    std::vector<T> table;   // dense, like HashField::tables
    std::vector<T> decoder;
    std::vector<T> viewspace;          // |dL/d(center NDC)| per surfel
    std::vector<std::uint8_t> visible; // surfel contributed to at least one pixel

    T surfel(int i, int slot) const { return surfels[std::size_t(i) * stride + slot]; }
};

namespace detail {
// Per-surfel intermediate gradient slots accumulated per tile.
inline constexpr int kGP = 0;      // position (3)
inline constexpr int kGR = 3;      // rotation matrix, column-major (9)
inline constexpr int kGS = 12;     // scale (2)
inline constexpr int kGA = 14;     // opacity (1)
inline constexpr int kGC = 15;     // center projection, pixels (2)
inline constexpr int kGColor = 17; // sh color (3)
inline constexpr int kGSlots = 20;
} // namespace detail

template <class T>
SceneGrads<T> render_backward(const Scene<T> &scene, const Camera &camera, const RenderOutput<T> &fwd,
                              const PixelGrads<T> &up, const HitGrads<T> &hit_up = {},
                              const BackwardOptions &bopt = {}, const RenderOptions &opt = {}) {
    using namespace detail;
    if (!fwd.has_aux)
        throw StateError("render_backward: forward pass kept no aux data");
    const bool shell = fwd.mode == RenderMode::Shell;
    const int W = fwd.width, H = fwd.height;
    const int N = static_cast<int>(scene.surfels.size());
    if (static_cast<int>(fwd.splats.size()) != N)
        throw StateError("render_backward: scene changed since the forward pass");
    const int dim = fwd.value_dim;
    const int ts = fwd.tile_size;
    const int ntiles = fwd.tiles_x * fwd.tiles_y;
    const Vec3<T> origin = camera.origin().template cast<T>();
    const T inv_var = T(1.0 / (opt.lowpass_sigma * opt.lowpass_sigma));

    auto at = [](const std::vector<T> &v, std::size_t i) { return v.empty() ? T(0) : v[i]; };

    struct TileGrad {
        std::vector<T> splat;   // list size * kGSlots
        std::vector<T> decoder; // dense
        std::vector<std::size_t> table_index;
        std::vector<T> table_value;
    };
    std::vector<TileGrad> tg(ntiles);

    parallel_for(std::size_t(ntiles), [&](std::size_t tile) {
        const int tx = int(tile) % fwd.tiles_x, ty = int(tile) / fwd.tiles_x;
        const std::size_t list_begin = fwd.tile_offsets[tile];
        const std::size_t list_size = fwd.tile_offsets[tile + 1] - list_begin;
        auto &g = tg[tile];
        g.splat.assign(list_size * kGSlots, T(0));
        if (shell)
            g.decoder.assign(scene.decoder->param_count(), T(0));
        const int x0 = tx * ts, y0 = ty * ts;
        const int tw = std::min(W, x0 + ts) - x0, th = std::min(H, y0 + ts) - y0;
        // Decoder reverse pass for the whole tile: feature gradients per pixel.
        typename Decoder<T>::ColMat feat_grad;
        if (shell) {
            typename Decoder<T>::ColMat input(scene.decoder->input_dim(), tw * th), g_c(3, tw * th);
            for (int y = y0; y < y0 + th; ++y)
                for (int x = x0; x < x0 + tw; ++x) {
                    const int pix = y * W + x, col = (y - y0) * tw + (x - x0);
                    detail::decoder_column(input, col, fwd.features.data() + std::size_t(pix) * dim, dim,
                                           camera.pixel_ray(x, y));
                    for (int k = 0; k < 3; ++k)
                        g_c(k, col) = fwd.alpha[pix] * at(up.rgb, pix * 3 + k);
                }
            if (!g_c.isZero()) {
                typename Decoder<T>::BatchWorkspace ws;
                scene.decoder->forward_batch(input, ws);
                scene.decoder->backward_batch(ws, g_c, g.decoder.data(), &feat_grad);
            }
        }
        std::vector<T> GF(dim), e, gvals(dim);
        if (shell) {
            std::size_t tile_hits = 0;
            for (int y = y0; y < y0 + th; ++y)
                for (int x = x0; x < x0 + tw; ++x)
                    tile_hits += fwd.pixel_count[y * W + x];
            const std::size_t per_hit = std::size_t(scene.field->levels) * 8 * scene.field->feat_dim;
            g.table_index.reserve(tile_hits * per_hit);
            g.table_value.reserve(tile_hits * per_hit);
        }

        for (int y = ty * ts; y < std::min(H, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(W, (tx + 1) * ts); ++x) {
                const int pix = y * W + x;
                const std::size_t hb = fwd.pixel_offsets[pix];
                const std::size_t n = fwd.pixel_count[pix];
                const Vec3<T> g_rgb(at(up.rgb, pix * 3), at(up.rgb, pix * 3 + 1), at(up.rgb, pix * 3 + 2));
                const Vec3<T> g_nrm(at(up.normal, pix * 3), at(up.normal, pix * 3 + 1),
                                    at(up.normal, pix * 3 + 2));
                const T g_depth = at(up.depth, pix);
                T GA = at(up.alpha, pix);
                const T A = fwd.alpha[pix];
                const Vec3<T> dir = camera.pixel_ray(x, y).template cast<T>();

                std::fill(GF.begin(), GF.end(), T(0));
                if (shell) {
                    const Vec3<T> c(fwd.decoded[pix * 3], fwd.decoded[pix * 3 + 1], fwd.decoded[pix * 3 + 2]);
                    GA += g_rgb.dot(c - scene.background);
                    if (feat_grad.size() > 0) {
                        const int col = (y - y0) * tw + (x - x0);
                        for (int k = 0; k < dim; ++k)
                            GF[k] = feat_grad(k, col);
                    }
                } else {
                    GA -= g_rgb.dot(scene.background);
                    for (int k = 0; k < 3; ++k)
                        GF[k] = g_rgb[k];
                }
                if (n == 0)
                    continue;
                T GD;
                if (A > T(1e-8)) {
                    GD = g_depth / A;
                    GA -= g_depth * fwd.depth_raw[pix] / (A * A);
                } else {
                    GD = g_depth / T(1e-8);
                }

                e.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const auto &h = fwd.hits[hb + i];
                    const T *val = fwd.hit_values.data() + (hb + i) * dim;
                    T ei = GA + GD * h.t + at(hit_up.weight, hb + i);
                    for (int k = 0; k < dim; ++k)
                        ei += GF[k] * val[k];
                    ei += h.normal_sign * g_nrm.dot(fwd.splats[h.surfel].R.col(2));
                    e[i] = ei;
                }

                T R = T(0);
                for (std::size_t ii = n; ii-- > 0;) {
                    const auto &h = fwd.hits[hb + ii];
                    const auto &ps = fwd.splats[h.surfel];
                    T *gs = g.splat.data() + std::size_t(h.local) * kGSlots;
                    const T g_a = h.transmittance * (e[ii] - R);
                    R = h.alpha_eff * e[ii] + (T(1) - h.alpha_eff) * R;
                    const T w = h.transmittance * h.alpha_eff;

                    const Vec3<T> r0 = ps.R.col(0), r1 = ps.R.col(1), r2 = ps.R.col(2);
                    Vec3<T> g_p = Vec3<T>::Zero(), g_r0 = Vec3<T>::Zero(), g_r1 = Vec3<T>::Zero(),
                            g_r2 = Vec3<T>::Zero();
                    T g_s0 = T(0), g_s1 = T(0);
                    T g_u = T(0), g_v = T(0);

                    // Value path.
                    if (shell) {
                        for (int k = 0; k < dim; ++k)
                            gvals[k] = w * GF[k];
                        const Vec3<T> q = field_query_point(h.point, *scene.field, scene.contract);
                        const Vec3<T> gq = encode_backward(
                            q, *scene.field, scene.anneal, std::span<const T>(gvals),
                            [&](std::size_t idx, T val) {
                                g.table_index.push_back(idx);
                                g.table_value.push_back(val);
                            },
                            bopt.feature_pos_grad);
                        if (bopt.feature_pos_grad) {
                            const Vec3<T> g_point = field_query_backward(h.point, *scene.field, scene.contract, gq);
                            // point = p + u s0 r0 + v s1 r1
                            g_p += g_point;
                            g_u += g_point.dot(ps.s[0] * r0);
                            g_v += g_point.dot(ps.s[1] * r1);
                            g_s0 += h.u * g_point.dot(r0);
                            g_s1 += h.v * g_point.dot(r1);
                            g_r0 += h.u * ps.s[0] * g_point;
                            g_r1 += h.v * ps.s[1] * g_point;
                        }
                    } else {
                        for (int k = 0; k < 3; ++k)
                            gs[kGColor + k] += w * GF[k];
                    }

                    // Blend weight.
                    const T g_weight = g_a * ps.alpha;
                    gs[kGA] += g_a * h.weight;
                    if (h.screen_branch) {
                        const T dx = ps.px - T(x + 0.5), dy = ps.py - T(y + 0.5);
                        gs[kGC] += -g_weight * h.g_screen * dx * inv_var;
                        gs[kGC + 1] += -g_weight * h.g_screen * dy * inv_var;
                    } else {
                        g_u += -h.u * h.g * g_weight;
                        g_v += -h.v * h.g * g_weight;
                    }

                    // Normal output.
                    g_r2 += h.normal_sign * w * g_nrm;

                    // Ray-plane solve: t = <p - o, n>/<d, n>, u = <x - p, r0>/s0, v = <x - p, r1>/s1.
                    const T g_t = w * GD + at(hit_up.depth, hb + ii);
                    const T dn = dir.dot(r2);
                    const Vec3<T> rel = h.point - ps.p;
                    const Vec3<T> g_x = g_u / ps.s[0] * r0 + g_v / ps.s[1] * r1;
                    const T g_tt = g_t + g_x.dot(dir);
                    g_p += -g_x + g_tt / dn * r2;
                    g_r2 += g_tt / dn * (-rel);
                    g_r0 += g_u / ps.s[0] * rel;
                    g_r1 += g_v / ps.s[1] * rel;
                    g_s0 += -g_u * h.u / ps.s[0];
                    g_s1 += -g_v * h.v / ps.s[1];

                    for (int k = 0; k < 3; ++k) {
                        gs[kGP + k] += g_p[k];
                        gs[kGR + k] += g_r0[k];
                        gs[kGR + 3 + k] += g_r1[k];
                        gs[kGR + 6 + k] += g_r2[k];
                    }
                    gs[kGS] += g_s0;
                    gs[kGS + 1] += g_s1;
                }
            }
        }
    });

    // Deterministic reduction in tile order.
    std::vector<T> acc(std::size_t(N) * kGSlots, T(0));
    SceneGrads<T> out;
    if (shell) {
        out.table.assign(scene.field->tables.size(), T(0));
        out.decoder.assign(scene.decoder->param_count(), T(0));
    }
    out.visible.assign(N, 0);
    for (int t = 0; t < ntiles; ++t) {
        const auto &g = tg[t];
        const std::size_t lb = fwd.tile_offsets[t];
        for (std::size_t k = 0; k + lb < fwd.tile_offsets[t + 1]; ++k) {
            const int idx = fwd.tile_splats[lb + k];
            for (int s = 0; s < kGSlots; ++s)
                acc[std::size_t(idx) * kGSlots + s] += g.splat[k * kGSlots + s];
        }
        for (std::size_t k = 0; k < g.table_index.size(); ++k)
            out.table[g.table_index[k]] += g.table_value[k];
        for (std::size_t k = 0; k < g.decoder.size(); ++k)
            out.decoder[k] += g.decoder[k];
    }
    for (const auto &h : fwd.hits)
        out.visible[h.surfel] = 1;

    // Map intermediate gradients onto stored parameters.
    int stride = Surfel<T>::kGeometryParams;
    if (!shell)
        stride += 3 * sh_coeff_count(scene.sh_degree);
    for (const auto &s : scene.surfels)
        stride = std::max(stride, s.param_count());
    out.stride = stride;
    out.surfels.assign(std::size_t(N) * stride, T(0));
    out.viewspace.assign(N, T(0));
    const Eigen::Matrix3d camR = camera.rotation;
    for (int i = 0; i < N; ++i) {
        const auto &ps = fwd.splats[i];
        if (!ps.visible)
            continue;
        const T *a = acc.data() + std::size_t(i) * kGSlots;
        const auto &sf = scene.surfels[i];
        T *o = out.surfels.data() + std::size_t(i) * stride;
        Vec3<T> g_p(a[kGP], a[kGP + 1], a[kGP + 2]);

        // Center projection (screen-space low-pass).
        if (a[kGC] != T(0) || a[kGC + 1] != T(0)) {
            const Vec3<T> pc = camR.transpose().template cast<T>() * (ps.p - origin);
            const T iz = T(1) / pc.z();
            const Vec3<T> g_pc(a[kGC] * T(camera.fx) * iz, a[kGC + 1] * T(camera.fy) * iz,
                               -(a[kGC] * T(camera.fx) * pc.x() + a[kGC + 1] * T(camera.fy) * pc.y()) * iz * iz);
            g_p += camR.template cast<T>() * g_pc;
        }
        // SH color along the center direction.
        if (!shell) {
            const Vec3<T> g_color(a[kGColor], a[kGColor + 1], a[kGColor + 2]);
            if (g_color.squaredNorm() > T(0)) {
                const Vec3<T> rel = ps.p - origin;
                const Vec3<T> g_dir =
                    sh_eval_backward(sf, Vec3<T>(rel.normalized()), scene.sh_degree, g_color, o + Surfel<T>::kSh);
                g_p += normalize_backward(rel, g_dir);
            }
        }
        for (int k = 0; k < 3; ++k)
            o[Surfel<T>::kPos + k] = g_p[k];
        Mat3<T> gR;
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < 3; ++r)
                gR(r, c) = a[kGR + c * 3 + r];
        const Vec4<T> gq = quat_to_rotation_backward(sf.rotation, gR);
        for (int k = 0; k < 4; ++k)
            o[Surfel<T>::kRot + k] = gq[k];
        o[Surfel<T>::kScale] = a[kGS] * ps.s[0];
        o[Surfel<T>::kScale + 1] = a[kGS + 1] * ps.s[1];
        o[Surfel<T>::kOpacity] = a[kGA] * ps.alpha * (T(1) - ps.alpha);

        // Positional gradient in NDC units of the image plane.
        const Vec3<T> gc = camR.transpose().template cast<T>() * g_p;
        const T gx = gc.x() * ps.depth / T(camera.fx) * T(0.5 * W);
        const T gy = gc.y() * ps.depth / T(camera.fy) * T(0.5 * H);
        out.viewspace[i] = std::sqrt(gx * gx + gy * gy);
    }
    return out;
}

} // namespace shelltex
