// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Multi-view datasets and transforms-JSON camera manifests.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/geometry.hpp"
#include "shelltex/io/image.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace shelltex {

enum class SceneKind { Bounded, Unbounded };

struct View {
    std::string name;
    Camera camera;
    Image image; // 3 or 4 channels
};

/// Colored point used to seed surfels.
struct SeedPoint {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    Eigen::Vector3d color = Eigen::Vector3d::Constant(0.5);
};

struct Dataset {
    std::string name;
    std::vector<View> train, test;
    SceneKind kind = SceneKind::Bounded;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    std::vector<SeedPoint> points;
    double scale = 1.0; // world rescale applied at load time

    /// Radius of the train camera centers around their mean, padded by 10%.
    double camera_extent() const {
        if (train.empty())
            return 1.0;
        Eigen::Vector3d c = Eigen::Vector3d::Zero();
        for (const auto &v : train)
            c += v.camera.origin();
        c /= double(train.size());
        double r = 0.0;
        for (const auto &v : train)
            r = std::max(r, (v.camera.origin() - c).norm());
        return 1.1 * std::max(r, 1e-6);
    }

    /// Checks that images match their cameras and (optionally) that both
    /// splits are present.
    void validate(bool require_splits = true) const {
        if (require_splits && (train.empty() || test.empty()))
            throw ConfigError("dataset needs at least one train and one test view");
        if (train.empty() && test.empty())
            throw ConfigError("dataset has no views");
        for (const auto *split : {&train, &test})
            for (const auto &v : *split) {
                v.camera.validate(1e-4);
                if (v.image.width != v.camera.width || v.image.height != v.camera.height)
                    throw IoError(IoError::Kind::DimensionMismatch, "image size differs from camera: " + v.name);
                if (v.image.channels != 3 && v.image.channels != 4)
                    throw IoError(IoError::Kind::DimensionMismatch, "images must be RGB or RGBA: " + v.name);
            }
    }
};

/// RGB target of a view; RGBA images are composited over `background`.
inline std::vector<float> view_rgb(const View &v, const Eigen::Vector3d &background) {
    const auto &img = v.image;
    std::vector<float> out(img.pixels() * 3);
    for (std::size_t i = 0; i < img.pixels(); ++i) {
        const float a = img.channels == 4 ? img.data[i * 4 + 3] : 1.0f;
        for (int c = 0; c < 3; ++c)
            out[i * 3 + c] = img.data[i * img.channels + c] * a + float(background[c]) * (1.0f - a);
    }
    return out;
}

namespace detail {

using Json = nlohmann::json;

inline Json read_json(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in)
        throw IoError(IoError::Kind::MissingFile, "cannot open manifest: " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception &e) {
        throw IoError(IoError::Kind::MalformedManifest, "invalid JSON in " + path.string() + ": " + e.what());
    }
}

/// Camera-to-world 4x4 in OpenGL axes (x right, y up, z backward) to an
/// OpenCV-axis camera.
inline void parse_pose(const Json &m, Camera &cam, const std::string &where) {
    if (!m.is_array() || m.size() != 4)
        throw IoError(IoError::Kind::MalformedMatrix, "transform_matrix must be 4x4: " + where);
    Eigen::Matrix4d M;
    for (int r = 0; r < 4; ++r) {
        if (!m[r].is_array() || m[r].size() != 4)
            throw IoError(IoError::Kind::MalformedMatrix, "transform_matrix must be 4x4: " + where);
        for (int c = 0; c < 4; ++c) {
            if (!m[r][c].is_number())
                throw IoError(IoError::Kind::MalformedMatrix, "non-numeric transform entry: " + where);
            M(r, c) = m[r][c].get<double>();
        }
    }
    if (!M.allFinite() || (M.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-6)
        throw IoError(IoError::Kind::MalformedMatrix, "transform_matrix bottom row must be 0 0 0 1: " + where);
    const Eigen::Matrix3d R = M.block<3, 3>(0, 0);
    const double err = (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (R.determinant() < 0.0 || err > 1e-4)
        throw IoError(IoError::Kind::NonRigidRotation, "non-rigid rotation in transform_matrix: " + where);
    cam.rotation = R;
    cam.rotation.col(1) = -R.col(1);
    cam.rotation.col(2) = -R.col(2);
    cam.translation = M.block<3, 1>(0, 3);
}

inline std::vector<View> load_frames(const Json &manifest, const std::filesystem::path &dir,
                                     const std::string &want_split, bool split_filter) {
    if (!manifest.contains("frames") || !manifest["frames"].is_array())
        throw IoError(IoError::Kind::MalformedManifest, "manifest has no frames array");
    std::vector<View> views;
    const auto &frames = manifest["frames"];
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto &f = frames[i];
        if (split_filter) {
            const std::string split = f.value("split", std::string("train"));
            if (split != want_split)
                continue;
        }
        if (!f.contains("file_path") || !f["file_path"].is_string())
            throw IoError(IoError::Kind::MalformedManifest, "frame without file_path");
        if (!f.contains("transform_matrix"))
            throw IoError(IoError::Kind::MalformedMatrix, "frame without transform_matrix");
        View v;
        std::filesystem::path rel = f["file_path"].get<std::string>();
        if (!rel.has_extension())
            rel += ".png";
        v.name = rel.stem().string();
        parse_pose(f["transform_matrix"], v.camera, rel.string());
        v.image = read_png((dir / rel).string());
        if (v.image.channels == 1 || v.image.channels == 2)
            throw IoError(IoError::Kind::DimensionMismatch, "grayscale images are not supported: " + rel.string());
        auto get = [&](const char *key, double fallback) {
            const Json *src = f.contains(key) ? &f[key] : manifest.contains(key) ? &manifest[key] : nullptr;
            if (!src)
                return fallback;
            if (!src->is_number())
                throw IoError(IoError::Kind::MalformedManifest, std::string("non-numeric field ") + key);
            return src->get<double>();
        };
        const int w = static_cast<int>(get("w", v.image.width));
        const int h = static_cast<int>(get("h", v.image.height));
        if (w != v.image.width || h != v.image.height)
            throw IoError(IoError::Kind::DimensionMismatch, "manifest size differs from image: " + rel.string());
        v.camera.width = w;
        v.camera.height = h;
        if (f.contains("fl_x") || manifest.contains("fl_x")) {
            v.camera.fx = get("fl_x", 0.0);
            v.camera.fy = get("fl_y", v.camera.fx);
        } else if (f.contains("camera_angle_x") || manifest.contains("camera_angle_x")) {
            v.camera.fx = v.camera.fy = 0.5 * w / std::tan(0.5 * get("camera_angle_x", 0.0));
        } else {
            throw IoError(IoError::Kind::MalformedManifest, "no focal length (camera_angle_x or fl_x)");
        }
        v.camera.cx = get("cx", 0.5 * w);
        v.camera.cy = get("cy", 0.5 * h);
        views.push_back(std::move(v));
    }
    return views;
}

} // namespace detail

/// Loads a directory holding transforms_train.json / transforms_test.json,
/// or transforms.json with optional per-frame "split", or a manifest path.
/// Bounded scenes are rescaled so the mean train camera distance from the
/// origin is 1 unless the manifest sets "scene_normalized".
inline Dataset load_dataset(const std::string &path, bool require_splits = true) {
    namespace fs = std::filesystem;
    if (!fs::exists(path))
        throw IoError(IoError::Kind::MissingFile, "dataset not found: " + path);
    Dataset ds;
    ds.name = fs::path(path).filename().string();
    detail::Json meta;
    if (fs::is_directory(path) && fs::exists(fs::path(path) / "transforms_train.json")) {
        const fs::path dir(path);
        meta = detail::read_json(dir / "transforms_train.json");
        ds.train = detail::load_frames(meta, dir, "", false);
        fs::path test = dir / "transforms_test.json";
        if (!fs::exists(test))
            test = dir / "transforms_val.json";
        if (!fs::exists(test))
            throw IoError(IoError::Kind::MissingFile, "missing transforms_test.json in " + path);
        ds.test = detail::load_frames(detail::read_json(test), dir, "", false);
    } else {
        const fs::path manifest = fs::is_directory(path) ? fs::path(path) / "transforms.json" : fs::path(path);
        meta = detail::read_json(manifest);
        const fs::path dir = manifest.parent_path();
        ds.train = detail::load_frames(meta, dir, "train", true);
        ds.test = detail::load_frames(meta, dir, "test", true);
        if (ds.test.empty() && ds.train.size() > 1) {
            // No explicit test split: hold out every 8th frame.
            std::vector<View> all = std::move(ds.train);
            ds.train.clear();
            for (std::size_t i = 0; i < all.size(); ++i)
                (i % 8 == 0 ? ds.test : ds.train).push_back(std::move(all[i]));
        }
    }
    if (meta.contains("scene_kind"))
        ds.kind = meta["scene_kind"].get<std::string>() == "unbounded" ? SceneKind::Unbounded : SceneKind::Bounded;
    if (meta.contains("background")) {
        const auto &b = meta["background"];
        if (!b.is_array() || b.size() != 3)
            throw IoError(IoError::Kind::MalformedManifest, "background must be [r, g, b]");
        ds.background = Eigen::Vector3d(b[0].get<double>(), b[1].get<double>(), b[2].get<double>());
    }
    const bool normalized = meta.value("scene_normalized", false);
    const auto &ref = ds.train.empty() ? ds.test : ds.train;
    if (ds.kind == SceneKind::Bounded && !normalized && !ref.empty()) {
        double mean = 0.0;
        for (const auto &v : ref)
            mean += v.camera.origin().norm();
        mean /= double(ref.size());
        if (mean > 1e-9) {
            ds.scale = 1.0 / mean;
            for (auto *split : {&ds.train, &ds.test})
                for (auto &v : *split)
                    v.camera.translation *= ds.scale;
        }
    }
    ds.validate(require_splits);
    return ds;
}

/// Writes a transforms-JSON manifest (OpenGL pose convention) for `views`
/// whose images are named <name>.png next to it.
inline void write_manifest(const std::string &path, const std::vector<View> &views, const Dataset *ref = nullptr,
                           const std::string &split = "test", bool normalized = true) {
    detail::Json j;
    j["scene_normalized"] = normalized;
    if (ref) {
        j["scene_kind"] = ref->kind == SceneKind::Bounded ? "bounded" : "unbounded";
        j["background"] = {ref->background[0], ref->background[1], ref->background[2]};
    }
    j["frames"] = detail::Json::array();
    for (const auto &v : views) {
        Eigen::Matrix4d M = Eigen::Matrix4d::Identity();
        M.block<3, 1>(0, 0) = v.camera.rotation.col(0);
        M.block<3, 1>(0, 1) = -v.camera.rotation.col(1);
        M.block<3, 1>(0, 2) = -v.camera.rotation.col(2);
        M.block<3, 1>(0, 3) = v.camera.translation;
        detail::Json f;
        f["file_path"] = v.name + ".png";
        f["fl_x"] = v.camera.fx;
        f["fl_y"] = v.camera.fy;
        f["cx"] = v.camera.cx;
        f["cy"] = v.camera.cy;
        f["w"] = v.camera.width;
        f["h"] = v.camera.height;
        f["split"] = split;
        detail::Json rows = detail::Json::array();
        for (int r = 0; r < 4; ++r)
            rows.push_back({M(r, 0), M(r, 1), M(r, 2), M(r, 3)});
        f["transform_matrix"] = rows;
        j["frames"].push_back(f);
    }
    std::ofstream out(path);
    if (!out)
        throw IoError(IoError::Kind::WriteFailed, "cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

} // namespace shelltex
