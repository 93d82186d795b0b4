// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// UV meshes (OBJ), texture baking from a trained field, and textured-mesh
// ray casting for checking baked textures.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/parallel.hpp"
#include "shelltex/decoder.hpp"
#include "shelltex/hashfield.hpp"
#include "shelltex/io/image.hpp"
#include "shelltex/io/synthetic.hpp"
#include "shelltex/renderer.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace shelltex {

struct UvMesh {
    std::vector<Eigen::Vector3d> vertices;
    std::vector<Eigen::Vector2d> uvs;
    std::vector<std::array<int, 3>> faces;    // vertex indices
    std::vector<std::array<int, 3>> face_uvs; // uv indices per corner

    void validate() const {
        if (faces.empty())
            throw IoError(IoError::Kind::BadMesh, "mesh has no triangles");
        if (face_uvs.size() != faces.size())
            throw IoError(IoError::Kind::BadMesh, "every triangle needs texture coordinates");
        for (std::size_t f = 0; f < faces.size(); ++f)
            for (int k = 0; k < 3; ++k) {
                if (faces[f][k] < 0 || faces[f][k] >= int(vertices.size()))
                    throw IoError(IoError::Kind::BadMesh, "triangle references a missing vertex");
                if (face_uvs[f][k] < 0 || face_uvs[f][k] >= int(uvs.size()))
                    throw IoError(IoError::Kind::BadMesh, "triangle references a missing uv");
            }
        for (const auto &uv : uvs)
            if (uv[0] < 0 || uv[0] > 1 || uv[1] < 0 || uv[1] > 1)
                throw IoError(IoError::Kind::BadMesh, "uv coordinates must lie in [0, 1]");
    }
};

/// Reads v / vt / f records; polygons are fan-triangulated.
inline UvMesh load_obj(const std::string &path) {
    std::ifstream in(path);
    if (!in)
        throw IoError(IoError::Kind::MissingFile, "cannot open mesh: " + path);
    UvMesh m;
    std::string line;
    int lineno = 0;
    auto resolve = [&](long idx, std::size_t count) {
        const long r = idx < 0 ? long(count) + idx : idx - 1;
        return static_cast<int>(r);
    };
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "v") {
            Eigen::Vector3d v;
            if (!(ss >> v[0] >> v[1] >> v[2]))
                throw IoError(IoError::Kind::BadMesh, "bad vertex on line " + std::to_string(lineno));
            m.vertices.push_back(v);
        } else if (tag == "vt") {
            Eigen::Vector2d t;
            if (!(ss >> t[0] >> t[1]))
                throw IoError(IoError::Kind::BadMesh, "bad uv on line " + std::to_string(lineno));
            m.uvs.push_back(t);
        } else if (tag == "f") {
            std::vector<std::array<int, 2>> corners;
            std::string tok;
            while (ss >> tok) {
                const auto s1 = tok.find('/');
                if (s1 == std::string::npos)
                    throw IoError(IoError::Kind::BadMesh, "face corner without uv on line " + std::to_string(lineno));
                const auto s2 = tok.find('/', s1 + 1);
                try {
                    const long vi = std::stol(tok.substr(0, s1));
                    const long ti = std::stol(tok.substr(s1 + 1, s2 == std::string::npos ? std::string::npos : s2 - s1 - 1));
                    corners.push_back({resolve(vi, m.vertices.size()), resolve(ti, m.uvs.size())});
                } catch (const std::logic_error &) {
                    throw IoError(IoError::Kind::BadMesh, "bad face on line " + std::to_string(lineno));
                }
            }
            if (corners.size() < 3)
                throw IoError(IoError::Kind::BadMesh, "face with fewer than 3 corners on line " + std::to_string(lineno));
            for (std::size_t k = 1; k + 1 < corners.size(); ++k) {
                m.faces.push_back({corners[0][0], corners[k][0], corners[k + 1][0]});
                m.face_uvs.push_back({corners[0][1], corners[k][1], corners[k + 1][1]});
            }
        }
    }
    m.validate();
    return m;
}

inline void save_obj(const UvMesh &m, const std::string &path) {
    std::ofstream out(path);
    if (!out)
        throw IoError(IoError::Kind::WriteFailed, "cannot write mesh: " + path);
    out.precision(17);
    for (const auto &v : m.vertices)
        out << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
    for (const auto &t : m.uvs)
        out << "vt " << t[0] << ' ' << t[1] << '\n';
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
        out << 'f';
        for (int k = 0; k < 3; ++k)
            out << ' ' << m.faces[f][k] + 1 << '/' << m.face_uvs[f][k] + 1;
        out << '\n';
    }
}

/// Two-triangle mesh of a plane primitive with uv matching PlanePrim::uv.
inline UvMesh plane_mesh(const PlanePrim &p) {
    UvMesh m;
    const double h = p.half_size;
    for (int k = 0; k < 4; ++k) {
        const double a = (k == 1 || k == 2) ? h : -h;
        const double b = (k >= 2) ? h : -h;
        m.vertices.push_back(p.center + a * p.axis_u + b * p.axis_v);
        m.uvs.push_back(Eigen::Vector2d((a + h) / (2 * h), (b + h) / (2 * h)));
    }
    m.faces = {{0, 1, 2}, {0, 2, 3}};
    m.face_uvs = m.faces;
    return m;
}

struct BakeResult {
    Image texture;
    int degenerate_triangles = 0;
    std::size_t covered_texels = 0;
};

/// Texel (i, j) of a res x res texture has its center at
/// uv = ((i + 0.5) / res, 1 - (j + 0.5) / res).
inline Eigen::Vector2d texel_uv(int i, int j, int res) {
    return {(i + 0.5) / res, 1.0 - (j + 0.5) / res};
}

namespace detail {
/// Barycentric coordinates of p in the uv triangle (a, b, c) of signed area `area`.
inline Eigen::Vector3d uv_barycentric(const Eigen::Vector2d &a, const Eigen::Vector2d &b, const Eigen::Vector2d &c,
                                      double area, const Eigen::Vector2d &p) {
    const double w0 = ((b - p).x() * (c - p).y() - (b - p).y() * (c - p).x()) / area;
    const double w1 = ((c - p).x() * (a - p).y() - (c - p).y() * (a - p).x()) / area;
    return {w0, w1, 1.0 - w0 - w1};
}

inline double uv_area(const Eigen::Vector2d &a, const Eigen::Vector2d &b, const Eigen::Vector2d &c) {
    return (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
}
} // namespace detail

/// Surface point whose texture coordinate is `uv`, if any triangle covers it.
inline std::optional<Eigen::Vector3d> uv_to_world(const UvMesh &mesh, const Eigen::Vector2d &uv) {
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto &U = mesh.face_uvs[f];
        const double area = detail::uv_area(mesh.uvs[U[0]], mesh.uvs[U[1]], mesh.uvs[U[2]]);
        if (std::abs(area) < 1e-12)
            continue;
        const Eigen::Vector3d w = detail::uv_barycentric(mesh.uvs[U[0]], mesh.uvs[U[1]], mesh.uvs[U[2]], area, uv);
        if (w.minCoeff() < -1e-9)
            continue;
        const auto &F = mesh.faces[f];
        return w[0] * mesh.vertices[F[0]] + w[1] * mesh.vertices[F[1]] + w[2] * mesh.vertices[F[2]];
    }
    return std::nullopt;
}

/// Samples the trained field over the mesh surface. Each covered texel gets
/// decode(f(q(x)), -n): the color seen along a ray hitting the surface head-on,
/// with n the winding normal. Uncovered texels are filled by two dilation passes.
template <class T> BakeResult bake_texture(const Scene<T> &scene, const UvMesh &mesh, int resolution) {
    if (!scene.field || !scene.decoder)
        throw ConfigError("bake: scene has no hash field / decoder");
    if (resolution <= 0)
        throw ConfigError("bake: resolution must be positive");
    mesh.validate();
    if (!scene.contract)
        for (const auto &v : mesh.vertices)
            if (v.cwiseAbs().maxCoeff() > double(scene.field->bound))
                throw DomainError("bake: mesh lies outside the field bound");

    const int R = resolution;
    BakeResult res;
    res.texture = Image(R, R, 3);
    std::vector<int> owner(std::size_t(R) * R, -1);
    std::vector<Eigen::Vector3d> bary(std::size_t(R) * R);
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const Eigen::Vector2d a = mesh.uvs[mesh.face_uvs[f][0]], b = mesh.uvs[mesh.face_uvs[f][1]],
                              c = mesh.uvs[mesh.face_uvs[f][2]];
        const double area = detail::uv_area(a, b, c);
        const Eigen::Vector3d pa = mesh.vertices[mesh.faces[f][0]], pb = mesh.vertices[mesh.faces[f][1]],
                              pc = mesh.vertices[mesh.faces[f][2]];
        if (std::abs(area) < 1e-12 || (pb - pa).cross(pc - pa).norm() < 1e-12) {
            ++res.degenerate_triangles;
            continue;
        }
        const double umin = std::min({a.x(), b.x(), c.x()}), umax = std::max({a.x(), b.x(), c.x()});
        const double vmin = std::min({a.y(), b.y(), c.y()}), vmax = std::max({a.y(), b.y(), c.y()});
        const int i0 = std::max(0, int(std::floor(umin * R - 0.5))), i1 = std::min(R - 1, int(std::ceil(umax * R)));
        const int j0 = std::max(0, int(std::floor((1 - vmax) * R - 0.5)));
        const int j1 = std::min(R - 1, int(std::ceil((1 - vmin) * R)));
        for (int j = j0; j <= j1; ++j)
            for (int i = i0; i <= i1; ++i) {
                const Eigen::Vector3d w = detail::uv_barycentric(a, b, c, area, texel_uv(i, j, R));
                if (w.minCoeff() < -1e-9)
                    continue;
                const std::size_t t = std::size_t(j) * R + i;
                if (owner[t] >= 0)
                    continue;
                owner[t] = static_cast<int>(f);
                bary[t] = w;
            }
    }

    std::vector<std::uint8_t> filled(std::size_t(R) * R, 0);
    parallel_for(std::size_t(R), [&](std::size_t row) {
        std::vector<T> feat(scene.field->output_dim());
        std::vector<T> input(scene.decoder->input_dim());
        typename Decoder<T>::Workspace ws;
        for (int i = 0; i < R; ++i) {
            const std::size_t t = row * R + i;
            const int f = owner[t];
            if (f < 0)
                continue;
            const auto &F = mesh.faces[f];
            const Eigen::Vector3d x =
                bary[t][0] * mesh.vertices[F[0]] + bary[t][1] * mesh.vertices[F[1]] + bary[t][2] * mesh.vertices[F[2]];
            const Eigen::Vector3d n =
                (mesh.vertices[F[1]] - mesh.vertices[F[0]]).cross(mesh.vertices[F[2]] - mesh.vertices[F[0]]).normalized();
            const Vec3<T> xq = field_query_point(Vec3<T>(x.template cast<T>()), *scene.field, scene.contract);
            encode(xq, *scene.field, scene.anneal, std::span<T>(feat));
            std::copy(feat.begin(), feat.end(), input.begin());
            const auto enc = encode_dir(Vec3<T>((-n).template cast<T>()));
            std::copy(enc.begin(), enc.end(), input.begin() + feat.size());
            const Vec3<T> c = scene.decoder->forward(input, ws);
            for (int k = 0; k < 3; ++k)
                res.texture.data[t * 3 + k] = float(c[k]);
            filled[t] = 1;
        }
    });
    for (auto v : filled)
        res.covered_texels += v;

    for (int pass = 0; pass < 2; ++pass) {
        std::vector<std::uint8_t> next = filled;
        Image out = res.texture;
        for (int j = 0; j < R; ++j)
            for (int i = 0; i < R; ++i) {
                const std::size_t t = std::size_t(j) * R + i;
                if (filled[t])
                    continue;
                Eigen::Vector3f acc = Eigen::Vector3f::Zero();
                int n = 0;
                for (int dj = -1; dj <= 1; ++dj)
                    for (int di = -1; di <= 1; ++di) {
                        const int ii = i + di, jj = j + dj;
                        if (ii < 0 || jj < 0 || ii >= R || jj >= R || !filled[std::size_t(jj) * R + ii])
                            continue;
                        for (int k = 0; k < 3; ++k)
                            acc[k] += res.texture.at(ii, jj, k);
                        ++n;
                    }
                if (n == 0)
                    continue;
                for (int k = 0; k < 3; ++k)
                    out.at(i, j, k) = acc[k] / float(n);
                next[t] = 1;
            }
        res.texture = std::move(out);
        filled = std::move(next);
    }
    return res;
}

/// Bilinear texture lookup at uv (v up), clamped to the border.
inline Eigen::Vector3d sample_texture(const Image &tex, const Eigen::Vector2d &uv) {
    const double fx = uv.x() * tex.width - 0.5, fy = (1.0 - uv.y()) * tex.height - 0.5;
    const int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    const double tx = fx - x0, ty = fy - y0;
    Eigen::Vector3d out = Eigen::Vector3d::Zero();
    for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
            const int x = std::clamp(x0 + dx, 0, tex.width - 1), y = std::clamp(y0 + dy, 0, tex.height - 1);
            const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty);
            for (int k = 0; k < 3; ++k)
                out[k] += w * tex.at(x, y, k);
        }
    return out;
}

struct TexturedRender {
    Image image;
    std::vector<std::uint8_t> mask; // pixel hit the mesh
};

/// Casts one ray per pixel center against the mesh and shades with the texture.
inline TexturedRender render_textured_mesh(const UvMesh &mesh, const Image &texture, const Camera &cam,
                                           const Eigen::Vector3d &background = Eigen::Vector3d::Zero()) {
    TexturedRender out;
    out.image = Image(cam.width, cam.height, 3);
    out.mask.assign(std::size_t(cam.width) * cam.height, 0);
    const Eigen::Vector3d o = cam.origin();
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const Eigen::Vector3d d = cam.pixel_ray(x, y);
            double best = std::numeric_limits<double>::infinity();
            Eigen::Vector2d uv;
            for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
                const auto &F = mesh.faces[f];
                const Eigen::Vector3d e1 = mesh.vertices[F[1]] - mesh.vertices[F[0]];
                const Eigen::Vector3d e2 = mesh.vertices[F[2]] - mesh.vertices[F[0]];
                const Eigen::Vector3d pv = d.cross(e2);
                const double det = e1.dot(pv);
                if (std::abs(det) < 1e-14)
                    continue;
                const Eigen::Vector3d tv = o - mesh.vertices[F[0]];
                const double u = tv.dot(pv) / det;
                const Eigen::Vector3d qv = tv.cross(e1);
                const double v = d.dot(qv) / det;
                const double t = e2.dot(qv) / det;
                if (u < 0 || v < 0 || u + v > 1 || !(t > 1e-9) || t >= best)
                    continue;
                best = t;
                const auto &U = mesh.face_uvs[f];
                uv = (1 - u - v) * mesh.uvs[U[0]] + u * mesh.uvs[U[1]] + v * mesh.uvs[U[2]];
            }
            const std::size_t p = std::size_t(y) * cam.width + x;
            Eigen::Vector3d c = background;
            if (std::isfinite(best)) {
                c = sample_texture(texture, uv);
                out.mask[p] = 1;
            }
            for (int k = 0; k < 3; ++k)
                out.image.data[p * 3 + k] = float(c[k]);
        }
    return out;
}

} // namespace shelltex
