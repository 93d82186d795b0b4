// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace shelltex;
using namespace shelltex::testing;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        const auto *info = ::testing::UnitTest::GetInstance()->current_test_info();
        mPath = fs::temp_directory_path() / ("shelltex_" + std::string(info->test_suite_name()) + "_" + info->name());
        fs::remove_all(mPath);
        fs::create_directories(mPath);
    }
    ~TempDir() { fs::remove_all(mPath); }
    const fs::path &path() const { return mPath; }
    std::string operator/(const std::string &name) const { return (mPath / name).string(); }

private:
    fs::path mPath;
};

nlohmann::json pose_json(const Eigen::Matrix4d &M) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < 4; ++r)
        rows.push_back({M(r, 0), M(r, 1), M(r, 2), M(r, 3)});
    return rows;
}

Eigen::Matrix4d look_pose(double x) {
    Eigen::Matrix4d M = Eigen::Matrix4d::Identity();
    M(0, 3) = x;
    M(2, 3) = 3.0;
    return M;
}

/// Writes a small manifest with `n` frames of size w x h into `dir`.
nlohmann::json write_frames(const TempDir &dir, int n, int w, int h) {
    nlohmann::json j;
    j["camera_angle_x"] = 0.8;
    j["frames"] = nlohmann::json::array();
    Rng rng(1);
    for (int i = 0; i < n; ++i) {
        Image img(w, h, 3);
        for (auto &v : img.data)
            v = float(rng.uniform());
        const std::string name = "f" + std::to_string(i);
        write_png(dir / (name + ".png"), img);
        j["frames"].push_back({{"file_path", name}, {"transform_matrix", pose_json(look_pose(0.1 * i))},
                               {"split", i == n - 1 ? "test" : "train"}});
    }
    return j;
}

void write_json(const std::string &path, const nlohmann::json &j) { std::ofstream(path) << j.dump(); }

IoError::Kind load_error(const std::string &path) {
    try {
        load_dataset(path);
    } catch (const IoError &e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an IoError";
    return IoError::Kind::WriteFailed;
}

Scene<float> random_scene(std::uint64_t seed, bool shell, int sh_degree) {
    Rng rng(seed);
    Scene<float> sc;
    const int n = 1 + int(rng.below(20));
    for (auto &s : micro_surfels(rng, n, shell ? -1 : sh_degree))
        sc.surfels.push_back(s.cast<float>());
    sc.background = Vec3<float>(float(rng.uniform()), float(rng.uniform()), float(rng.uniform()));
    if (shell) {
        HashFieldConfig fc = HashFieldConfig::desk();
        fc.init_range = 1.0;
        sc.field = HashField<float>::create(fc, rng);
        sc.decoder = Decoder<float>::standard(sc.field->output_dim(), rng, 8, 1);
        sc.anneal.lambda = int(rng.below(3));
        sc.contract = rng.uniform() < 0.5;
    } else {
        sc.sh_degree = sh_degree;
    }
    return sc;
}

Scene<float> constant_field_scene(float value) {
    Rng rng(3);
    Scene<float> sc;
    HashFieldConfig fc = HashFieldConfig::desk();
    sc.field = HashField<float>::create(fc, rng);
    std::fill(sc.field->tables.begin(), sc.field->tables.end(), value);
    sc.decoder = Decoder<float>::standard(sc.field->output_dim(), rng, 8, 1);
    return sc;
}

/// Direct windowed SSIM, zero padded, for cross-checking the separable version.
double brute_ssim(const std::vector<double> &a, const std::vector<double> &b, int W, int H, int C) {
    const auto &k = detail::ssim_kernel();
    const int r = detail::kSsimRadius;
    double total = 0.0;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double mx = 0, my = 0, exx = 0, eyy = 0, exy = 0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int xx = x + dx, yy = y + dy;
                        if (xx < 0 || yy < 0 || xx >= W || yy >= H)
                            continue;
                        const double w = k[dx + r] * k[dy + r];
                        const double u = a[(yy * W + xx) * C + c], v = b[(yy * W + xx) * C + c];
                        mx += w * u;
                        my += w * v;
                        exx += w * u * u;
                        eyy += w * v * v;
                        exy += w * u * v;
                    }
                const double C1 = 1e-4, C2 = 9e-4;
                total += (2 * mx * my + C1) * (2 * (exy - mx * my) + C2) /
                         ((mx * mx + my * my + C1) * (exx - mx * mx + eyy - my * my + C2));
            }
    return total / double(W * H * C);
}

} // namespace

TEST(Png, RoundTrip8And16Bit) {
    TempDir dir;
    Rng rng(2);
    Image img(5, 4, 4);
    for (auto &v : img.data)
        v = float(rng.uniform());
    write_png(dir / "a.png", img, 8);
    write_png(dir / "b.png", img, 16);
    const Image a = read_png(dir / "a.png"), b = read_png(dir / "b.png");
    ASSERT_EQ(a.channels, 4);
    ASSERT_EQ(a.width, 5);
    ASSERT_EQ(a.height, 4);
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        EXPECT_NEAR(a.data[i], img.data[i], 0.5f / 255.0f + 1e-6f);
        EXPECT_NEAR(b.data[i], img.data[i], 0.5f / 65535.0f + 1e-6f);
    }
}

TEST(Png, SixteenBitFullScaleIsOne) {
    TempDir dir;
    Image img(2, 2, 3, 1.0f);
    write_png(dir / "w.png", img, 16);
    for (float v : read_png(dir / "w.png").data)
        EXPECT_EQ(v, 1.0f);
}

TEST(Png, CorruptAndMissingFiles) {
    TempDir dir;
    std::ofstream(dir / "bad.png") << "definitely not a png";
    try {
        read_png(dir / "bad.png");
        FAIL();
    } catch (const IoError &e) {
        EXPECT_EQ(e.kind(), IoError::Kind::BadImage);
    }
    // Valid signature, garbage body.
    {
        std::ofstream out(dir / "trunc.png", std::ios::binary);
        const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
        out.write(reinterpret_cast<const char *>(sig), 8);
        out << "garbage";
    }
    EXPECT_THROW(read_png(dir / "trunc.png"), IoError);
    try {
        read_png(dir / "nope.png");
        FAIL();
    } catch (const IoError &e) {
        EXPECT_EQ(e.kind(), IoError::Kind::MissingFile);
    }
}

TEST(Dataset, LoadsManifest) {
    TempDir dir;
    write_json(dir / "transforms.json", write_frames(dir, 3, 6, 5));
    const Dataset ds = load_dataset(dir.path().string());
    EXPECT_EQ(ds.train.size() + ds.test.size(), 3u);
    EXPECT_EQ(ds.test.size(), 1u);
    for (const auto &v : ds.train) {
        EXPECT_EQ(v.camera.width, 6);
        EXPECT_EQ(v.camera.height, 5);
        EXPECT_NEAR(v.camera.fx, 3.0 / std::tan(0.4), 1e-12);
        // OpenGL -z forward becomes OpenCV +z forward.
        EXPECT_LT((v.camera.rotation.col(2) - Eigen::Vector3d(0, 0, -1)).norm(), 1e-12);
    }
}

TEST(Dataset, NonRigidRotationRejected) {
    TempDir dir;
    auto j = write_frames(dir, 2, 4, 4);
    Eigen::Matrix4d M = look_pose(0);
    M(0, 0) = -1.0; // determinant -1
    j["frames"][0]["transform_matrix"] = pose_json(M);
    write_json(dir / "transforms.json", j);
    EXPECT_EQ(load_error(dir.path().string()), IoError::Kind::NonRigidRotation);
    M(0, 0) = 1.2; // scaled
    j["frames"][0]["transform_matrix"] = pose_json(M);
    write_json(dir / "transforms.json", j);
    EXPECT_EQ(load_error(dir.path().string()), IoError::Kind::NonRigidRotation);
}

TEST(Dataset, MalformedMatrixRejected) {
    TempDir dir;
    auto j = write_frames(dir, 2, 4, 4);
    j["frames"][1]["transform_matrix"] = {{1, 0, 0}, {0, 1, 0}};
    write_json(dir / "transforms.json", j);
    EXPECT_EQ(load_error(dir.path().string()), IoError::Kind::MalformedMatrix);
}

TEST(Dataset, MissingFilesRejected) {
    TempDir dir;
    EXPECT_EQ(load_error(dir / "absent"), IoError::Kind::MissingFile);
    auto j = write_frames(dir, 2, 4, 4);
    j["frames"][0]["file_path"] = "ghost";
    write_json(dir / "transforms.json", j);
    EXPECT_EQ(load_error(dir.path().string()), IoError::Kind::MissingFile);
}

TEST(Dataset, DimensionMismatchRejected) {
    TempDir dir;
    auto j = write_frames(dir, 2, 4, 4);
    j["w"] = 8;
    write_json(dir / "transforms.json", j);
    EXPECT_EQ(load_error(dir.path().string()), IoError::Kind::DimensionMismatch);
}

TEST(Dataset, ManifestRoundTrip) {
    TempDir dir;
    SceneSpec spec;
    spec.width = spec.height = 8;
    spec.train_views = 3;
    spec.test_views = 2;
    spec.supersample = 1;
    const auto g = generate_scene(spec);
    std::vector<View> all = g.dataset.train;
    for (const auto &v : all)
        write_png(dir / (v.name + ".png"), v.image, 16);
    write_manifest(dir / "transforms.json", all, &g.dataset, "train");
    auto j = nlohmann::json::parse(std::ifstream(dir / "transforms.json"));
    j["frames"][2]["split"] = "test";
    write_json(dir / "transforms.json", j);
    const Dataset ds = load_dataset(dir.path().string());
    ASSERT_EQ(ds.train.size(), 2u);
    EXPECT_EQ(ds.scale, 1.0);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto &a = ds.train[i].camera, &b = all[i].camera;
        EXPECT_LT((a.rotation - b.rotation).norm(), 1e-12);
        EXPECT_LT((a.translation - b.translation).norm(), 1e-12);
        EXPECT_DOUBLE_EQ(a.fx, b.fx);
    }
}

TEST(Synthetic, CenterPixelMatchesAnalyticChecker) {
    SceneSpec spec;
    spec.preset = "checker-plane";
    const AnalyticScene sc = make_preset(spec);
    const Eigen::Vector3d eye(0.1, 0.13, 1.0);
    const Camera cam = Camera::look_at(eye, Eigen::Vector3d(0.1, 0.13, 0.0), Eigen::Vector3d::UnitY(), 0.5, 65, 65);
    const Image img = sc.render(cam, 1);
    // Ray through the center pixel goes straight down to (0.1, 0.13, 0).
    const double u = 0.1 + 0.5, v = 0.13 + 0.5;
    const int cell = int(std::floor(u * 6)) + int(std::floor(v * 6));
    const Eigen::Vector3d want = cell % 2 == 0 ? sc.planes[0].albedo.color_a : sc.planes[0].albedo.color_b;
    for (int k = 0; k < 3; ++k)
        EXPECT_NEAR(img.at(32, 32, k), want[k], 1e-6);
}

TEST(Synthetic, EmptyPresetIsBackground) {
    SceneSpec spec;
    spec.preset = "empty";
    spec.width = spec.height = 8;
    spec.train_views = spec.test_views = 1;
    spec.background = Eigen::Vector3d(0.25, 0.5, 1.0);
    const auto g = generate_scene(spec);
    const auto &img = g.dataset.train[0].image;
    for (std::size_t p = 0; p < img.pixels(); ++p)
        for (int k = 0; k < 3; ++k)
            EXPECT_EQ(img.data[p * 3 + k], float(spec.background[k]));
    EXPECT_EQ(g.dataset.background, spec.background);
    EXPECT_TRUE(g.dataset.points.empty());
}

TEST(Synthetic, Deterministic) {
    SceneSpec spec;
    spec.width = spec.height = 16;
    spec.train_views = 3;
    spec.test_views = 1;
    spec.seed = 42;
    const auto a = generate_scene(spec), b = generate_scene(spec);
    ASSERT_EQ(a.dataset.train.size(), b.dataset.train.size());
    for (std::size_t i = 0; i < a.dataset.train.size(); ++i) {
        EXPECT_EQ(a.dataset.train[i].image.data, b.dataset.train[i].image.data);
        EXPECT_EQ(a.dataset.train[i].camera.rotation, b.dataset.train[i].camera.rotation);
    }
    ASSERT_EQ(a.dataset.points.size(), b.dataset.points.size());
    for (std::size_t i = 0; i < a.dataset.points.size(); ++i)
        EXPECT_EQ(a.dataset.points[i].position, b.dataset.points[i].position);
}

TEST(Synthetic, InvalidSpecRejected) {
    SceneSpec spec;
    spec.preset = "no-such-preset";
    EXPECT_THROW(generate_scene(spec), ConfigError);
    spec = {};
    spec.width = 0;
    EXPECT_THROW(generate_scene(spec), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    for (std::uint64_t seed = 1; seed <= 12; ++seed) {
        const bool shell = seed % 2 == 0;
        const Scene<float> sc = random_scene(seed, shell, int(seed % 4));
        const auto bytes = serialize_checkpoint(sc, "{\"seed\":" + std::to_string(seed) + "}");
        const Checkpoint ck = deserialize_checkpoint(bytes);
        EXPECT_EQ(serialize_checkpoint(ck.scene, ck.config), bytes);
        ASSERT_EQ(ck.scene.surfels.size(), sc.surfels.size());
        for (std::size_t i = 0; i < sc.surfels.size(); ++i) {
            EXPECT_EQ(ck.scene.surfels[i].position, sc.surfels[i].position);
            EXPECT_EQ(ck.scene.surfels[i].rotation, sc.surfels[i].rotation);
            EXPECT_EQ(ck.scene.surfels[i].log_scale, sc.surfels[i].log_scale);
            EXPECT_EQ(ck.scene.surfels[i].opacity_logit, sc.surfels[i].opacity_logit);
            EXPECT_EQ(ck.scene.surfels[i].sh, sc.surfels[i].sh);
        }
        EXPECT_EQ(bool(ck.scene.field), shell);
        if (shell) {
            EXPECT_EQ(ck.scene.field->tables, sc.field->tables);
            EXPECT_EQ(ck.scene.field->resolutions, sc.field->resolutions);
            EXPECT_EQ(ck.scene.decoder->params(), sc.decoder->params());
            EXPECT_EQ(ck.scene.anneal.lambda, sc.anneal.lambda);
            EXPECT_EQ(ck.scene.contract, sc.contract);
        }
        EXPECT_EQ(ck.scene.background, sc.background);
        EXPECT_EQ(ck.scene.sh_degree, sc.sh_degree);
    }
}

TEST(Checkpoint, FileRoundTrip) {
    TempDir dir;
    const Scene<float> sc = random_scene(5, true, 0);
    save_checkpoint(sc, dir / "a.shtx", "{}");
    const Checkpoint ck = load_checkpoint(dir / "a.shtx");
    EXPECT_EQ(serialize_checkpoint(ck.scene), serialize_checkpoint(sc));
}

TEST(Checkpoint, TruncationDetected) {
    const auto bytes = serialize_checkpoint(random_scene(7, true, 0));
    for (std::size_t cut : {std::size_t(10), std::size_t(30), bytes.size() / 2, bytes.size() - 1}) {
        try {
            deserialize_checkpoint(std::vector<char>(bytes.begin(), bytes.begin() + cut));
            FAIL() << "cut " << cut;
        } catch (const IoError &e) {
            EXPECT_EQ(e.kind(), IoError::Kind::TruncatedCheckpoint) << "cut " << cut;
        }
    }
}

TEST(Checkpoint, VersionAndMagicChecked) {
    auto bytes = serialize_checkpoint(random_scene(8, false, 1));
    auto bumped = bytes;
    bumped[4] = 2;
    try {
        deserialize_checkpoint(bumped);
        FAIL();
    } catch (const IoError &e) {
        EXPECT_EQ(e.kind(), IoError::Kind::VersionMismatch);
    }
    bytes[0] = 'X';
    try {
        deserialize_checkpoint(bytes);
        FAIL();
    } catch (const IoError &e) {
        EXPECT_EQ(e.kind(), IoError::Kind::NotACheckpoint);
    }
}

TEST(Checkpoint, GeometryBlockIsFortyBytesPerSurfel) {
    Scene<float> sc;
    const std::size_t empty = serialize_checkpoint(sc).size();
    Rng rng(9);
    for (const auto &s : micro_surfels(rng, 25))
        sc.surfels.push_back(s.cast<float>());
    EXPECT_EQ(serialize_checkpoint(sc).size() - empty, 25u * 40u);
    const auto fp = footprint(sc);
    EXPECT_EQ(fp.geometry_bytes, 1000u);
    EXPECT_EQ(fp.appearance_bytes, 0u);
}

TEST(Metrics, PsnrExamples) {
    std::vector<double> a(48, 0.3), b(48, 0.4);
    EXPECT_EQ(psnr<double>(a, a), 99.0);
    EXPECT_NEAR(psnr<double>(a, b), 20.0, 1e-9);
    EXPECT_THROW(psnr<double>(a, std::vector<double>(3)), DomainError);
}

TEST(Metrics, PsnrMatchesBruteForce) {
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_image(rng, 300), b = random_image(rng, 300);
        double se = 0;
        for (std::size_t i = 0; i < a.size(); ++i)
            se += (a[i] - b[i]) * (a[i] - b[i]);
        EXPECT_NEAR(psnr<double>(a, b), 10.0 * std::log10(a.size() / se), 1e-10);
    }
}

TEST(Metrics, SsimMatchesBruteForce) {
    Rng rng(11);
    const int W = 13, H = 9, C = 3;
    const auto a = random_image(rng, W * H * C), b = random_image(rng, W * H * C);
    EXPECT_NEAR(ssim_metric<double>(a, b, W, H, C), brute_ssim(a, b, W, H, C), 1e-10);
    EXPECT_NEAR(ssim_metric<double>(a, a, W, H, C), 1.0, 1e-12);
}

TEST(Metrics, MaskedPsnr) {
    std::vector<double> a{0, 0, 1, 1}, b{0, 0.1, 1, 0};
    const std::vector<std::uint8_t> mask{1, 1, 1, 0};
    EXPECT_NEAR(psnr_masked<double>(a, b, mask, 1), 10.0 * std::log10(3.0 / 0.01), 1e-9);
}

TEST(Mesh, PlaneUvCenterMapsToWorldCenter) {
    PlanePrim p;
    p.center = Eigen::Vector3d(0.1, -0.2, 0.05);
    const UvMesh m = plane_mesh(p);
    const auto x = uv_to_world(m, Eigen::Vector2d(0.5, 0.5));
    ASSERT_TRUE(x);
    EXPECT_LT((*x - p.center).norm(), 1e-12);
    const auto corner = uv_to_world(m, Eigen::Vector2d(1.0, 0.0));
    ASSERT_TRUE(corner);
    EXPECT_LT((*corner - (p.center + 0.5 * p.axis_u - 0.5 * p.axis_v)).norm(), 1e-12);
    Rng rng(12);
    for (int i = 0; i < 100; ++i) {
        const Eigen::Vector2d uv(rng.uniform(), rng.uniform());
        EXPECT_LT((p.uv(*uv_to_world(m, uv)) - uv).norm(), 1e-12);
    }
}

TEST(Mesh, ObjRoundTrip) {
    TempDir dir;
    const UvMesh m = plane_mesh(PlanePrim{});
    save_obj(m, dir / "p.obj");
    const UvMesh r = load_obj(dir / "p.obj");
    ASSERT_EQ(r.faces.size(), 2u);
    for (std::size_t i = 0; i < m.vertices.size(); ++i)
        EXPECT_LT((r.vertices[i] - m.vertices[i]).norm(), 1e-9);
    EXPECT_EQ(r.faces, m.faces);
}

TEST(Bake, ConstantFieldGivesUniformTexture) {
    const Scene<float> sc = constant_field_scene(0.3f);
    const auto res = bake_texture(sc, plane_mesh(PlanePrim{}), 16);
    EXPECT_EQ(res.covered_texels, 256u);
    EXPECT_EQ(res.degenerate_triangles, 0);
    for (int k = 0; k < 3; ++k)
        for (int t = 0; t < 256; ++t)
            EXPECT_NEAR(res.texture.data[t * 3 + k], res.texture.data[k], 1e-6);
}

TEST(Bake, TexelMatchesDecodedFieldAtSurfacePoint) {
    Rng rng(13);
    Scene<float> sc = constant_field_scene(0.0f);
    for (auto &v : sc.field->tables)
        v = float(rng.uniform(-1, 1));
    const PlanePrim p;
    const UvMesh m = plane_mesh(p);
    const int R = 8;
    const auto res = bake_texture(sc, m, R);
    for (int j = 0; j < R; ++j)
        for (int i = 0; i < R; ++i) {
            const Eigen::Vector3d x = *uv_to_world(m, texel_uv(i, j, R));
            const auto f = encode(Vec3<float>(x.cast<float>()), *sc.field, sc.anneal);
            const Vec3<float> c = decode(std::span<const float>(f), Vec3<float>(-p.normal().cast<float>()), *sc.decoder);
            for (int k = 0; k < 3; ++k)
                EXPECT_NEAR(res.texture.at(i, j, k), c[k], 1e-5);
        }
}

TEST(Bake, Errors) {
    const Scene<float> sc = constant_field_scene(0.1f);
    EXPECT_THROW(bake_texture(sc, UvMesh{}, 8), IoError);
    PlanePrim big;
    big.half_size = 2.0;
    EXPECT_THROW(bake_texture(sc, plane_mesh(big), 8), DomainError);
    Scene<float> bare;
    EXPECT_THROW(bake_texture(bare, plane_mesh(PlanePrim{}), 8), ConfigError);
}

TEST(Bake, TexturedRenderOfUniformTexture) {
    Image tex(4, 4, 3, 0.25f);
    const UvMesh m = plane_mesh(PlanePrim{});
    const Camera cam =
        Camera::look_at(Eigen::Vector3d(0, 0, 2), Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY(), 0.9, 16, 16);
    const auto out = render_textured_mesh(m, tex, cam, Eigen::Vector3d(1, 0, 0));
    int hit = 0;
    for (std::size_t p = 0; p < out.mask.size(); ++p) {
        const float want = out.mask[p] ? 0.25f : 1.0f;
        EXPECT_FLOAT_EQ(out.image.data[p * 3], want);
        hit += out.mask[p];
    }
    EXPECT_GT(hit, 0);
    EXPECT_LT(hit, 256);
}
