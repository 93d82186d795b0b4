// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// shelltex command-line tool: train, render, eval, bake, info.
//
#include "shelltex/shelltex.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace shelltex;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SourceOptions {
    std::string data;
    std::string scene;
    int width = 64, height = 64;
    int train_views = 20, test_views = 5;
    bool value_noise = false;
};

void add_source_options(CLI::App *cmd, SourceOptions &o) {
    cmd->add_option("--data", o.data, "Dataset directory or transforms JSON");
    cmd->add_option("--scene", o.scene, "Built-in scene, synthetic:<preset> "
                                        "(checker-plane, checker-plane-sphere, hf-checker-plane, empty)");
    cmd->add_option("--width", o.width, "Synthetic image width")->check(CLI::PositiveNumber);
    cmd->add_option("--height", o.height, "Synthetic image height")->check(CLI::PositiveNumber);
    cmd->add_option("--train-views", o.train_views, "Synthetic train view count")->check(CLI::PositiveNumber);
    cmd->add_option("--test-views", o.test_views, "Synthetic test view count")->check(CLI::PositiveNumber);
    cmd->add_flag("--value-noise", o.value_noise, "Synthetic: value-noise albedo instead of checkers");
}

void require_source(const SourceOptions &o) {
    if (o.data.empty() == o.scene.empty())
        throw UsageError("exactly one of --data or --scene is required");
    if (!o.scene.empty() && o.scene.rfind("synthetic:", 0) != 0)
        throw UsageError("--scene must look like synthetic:<preset>");
}

SceneSpec synthetic_spec(const SourceOptions &o, std::uint64_t seed) {
    SceneSpec s;
    s.preset = o.scene.substr(std::string("synthetic:").size());
    s.width = o.width;
    s.height = o.height;
    s.train_views = o.train_views;
    s.test_views = o.test_views;
    s.value_noise = o.value_noise;
    s.seed = seed;
    return s;
}

void require_path(const std::string &path, const char *what) {
    if (!std::filesystem::exists(path))
        throw UsageError(std::string(what) + " not found: " + path);
}

Checkpoint open_checkpoint(const std::string &path) {
    require_path(path, "checkpoint");
    return load_checkpoint(path);
}

Dataset load_source(const SourceOptions &o, std::uint64_t seed, bool require_splits = true) {
    if (!o.scene.empty())
        return generate_scene(synthetic_spec(o, seed)).dataset;
    require_path(o.data, "dataset");
    return load_dataset(o.data, require_splits);
}

void write_renders(const Scene<float> &scene, const std::vector<View> &views, const std::string &dir,
                   const RenderOptions &opt) {
    fs::create_directories(dir);
    for (const auto &v : views) {
        const auto r = render(scene, v.camera, scene_mode(scene), opt, false);
        Image img(v.camera.width, v.camera.height, 3);
        std::copy(r.rgb.begin(), r.rgb.end(), img.data.begin());
        write_png((fs::path(dir) / (v.name + ".png")).string(), img);
    }
}

std::string format_bytes(std::size_t b) {
    char buf[64];
    if (b >= (1u << 20))
        std::snprintf(buf, sizeof buf, "%zu (%.2f MiB)", b, double(b) / double(1u << 20));
    else if (b >= 1024)
        std::snprintf(buf, sizeof buf, "%zu (%.2f KiB)", b, double(b) / 1024.0);
    else
        std::snprintf(buf, sizeof buf, "%zu", b);
    return buf;
}

// ---------------------------------------------------------------- train

struct TrainOptions {
    SourceOptions src;
    std::string out = "shelltex_run";
    std::string profile = "desk";
    int iters = 0, stage1 = -1, stage2 = -1;
    int anneal_every = 0, max_surfels = -1, sh_degree = -1, eval_every = -1, log_every = -1;
    std::uint64_t seed = 0;
    bool no_feature_pos_grad = false;
};

int cmd_train(const TrainOptions &o) {
    require_source(o.src);
    if (o.out.empty())
        throw UsageError("--out must not be empty");
    if (o.profile != "desk" && o.profile != "full")
        throw UsageError("--profile must be desk or full");
    TrainConfig cfg = o.profile == "desk" ? TrainConfig::desk() : TrainConfig{};
    if (o.iters > 0) {
        cfg.stage1_iters = o.iters / 3;
        cfg.stage2_iters = o.iters - cfg.stage1_iters;
    }
    if (o.stage1 >= 0)
        cfg.stage1_iters = o.stage1;
    if (o.stage2 >= 0)
        cfg.stage2_iters = o.stage2;
    if (o.anneal_every > 0)
        cfg.anneal_every = o.anneal_every;
    if (o.max_surfels >= 0)
        cfg.densify.max_surfels = o.max_surfels;
    if (o.sh_degree >= 0)
        cfg.sh_degree = o.sh_degree;
    if (o.eval_every >= 0)
        cfg.eval_every = o.eval_every;
    if (o.log_every >= 0)
        cfg.log_every = o.log_every;
    cfg.seed = o.seed;
    cfg.feature_pos_grad = !o.no_feature_pos_grad;
    try {
        cfg.validate();
    } catch (const ConfigError &e) {
        throw UsageError(e.what());
    }

    const Dataset ds = load_source(o.src, o.seed);
    fs::create_directories(o.out);
    const std::string log_path = (fs::path(o.out) / "progress.jsonl").string();
    std::ofstream log(log_path);
    if (!log)
        throw IoError(IoError::Kind::WriteFailed, "cannot write " + log_path);

    Trainer trainer(ds, cfg);
    const auto result = trainer.run([&](const TrainRecord &r) {
        log << r.to_json().dump() << "\n";
        log.flush();
        std::cerr << "iter " << r.iter << " stage " << r.stage << " loss " << r.loss << " psnr " << r.psnr
                  << " surfels " << r.surfels;
        if (r.test_psnr >= 0)
            std::cerr << " test_psnr " << r.test_psnr;
        std::cerr << "\n";
    });

    const std::string ckpt = (fs::path(o.out) / "checkpoint.shtx").string();
    save_checkpoint(result.scene, ckpt, trainer.config().to_json().dump());
    write_renders(result.scene, ds.test, (fs::path(o.out) / "renders").string(), cfg.render);

    nlohmann::json metrics{{"train_psnr", result.train_psnr},
                           {"test_psnr", result.test_psnr},
                           {"surfels", result.scene.surfels.size()},
                           {"iterations", trainer.iteration()}};
    std::ofstream(fs::path(o.out) / "metrics.json") << metrics.dump(2) << "\n";
    std::cout << "checkpoint " << ckpt << "\n"
              << "train_psnr " << result.train_psnr << "\n"
              << "test_psnr " << result.test_psnr << "\n"
              << "surfels " << result.scene.surfels.size() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- render

struct RenderCmdOptions {
    SourceOptions src;
    std::string checkpoint, out, split = "test";
    std::uint64_t seed = 0;
};

std::vector<View> pick_split(const Dataset &ds, const std::string &split) {
    if (split == "train")
        return ds.train;
    if (split == "test")
        return ds.test;
    std::vector<View> all = ds.train;
    all.insert(all.end(), ds.test.begin(), ds.test.end());
    return all;
}

int cmd_render(const RenderCmdOptions &o) {
    require_source(o.src);
    if (o.checkpoint.empty() || o.out.empty())
        throw UsageError("--checkpoint and --out are required");
    const auto ck = open_checkpoint(o.checkpoint);
    const Dataset ds = load_source(o.src, o.seed, false);
    const auto views = pick_split(ds, o.split);
    if (views.empty())
        throw ConfigError("no views in split " + o.split);
    write_renders(ck.scene, views, o.out, RenderOptions{});
    // The manifest keeps the (already normalized) poses so the renders can be
    // loaded back as a dataset.
    write_manifest((fs::path(o.out) / "transforms.json").string(), views, &ds, "test", true);
    std::cout << "rendered " << views.size() << " views to " << o.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const RenderCmdOptions &o, bool json) {
    require_source(o.src);
    if (o.checkpoint.empty())
        throw UsageError("--checkpoint is required");
    const auto ck = open_checkpoint(o.checkpoint);
    const Dataset ds = load_source(o.src, o.seed, false);
    auto views = pick_split(ds, o.split);
    if (views.empty())
        views = pick_split(ds, "all");
    nlohmann::json report = nlohmann::json::array();
    double sp = 0, ss = 0;
    for (const auto &v : views) {
        const auto r = render(ck.scene, v.camera, scene_mode(ck.scene), RenderOptions{}, false);
        Image pred(v.camera.width, v.camera.height, 3);
        std::copy(r.rgb.begin(), r.rgb.end(), pred.data.begin());
        pred = quantize8(pred);
        const auto gt = view_rgb(v, ds.background);
        const double p = psnr<float>(pred.data, gt);
        const double s = ssim_metric<float>(pred.data, gt, v.camera.width, v.camera.height, 3);
        sp += p;
        ss += s;
        if (json)
            report.push_back({{"view", v.name}, {"psnr", p}, {"ssim", s}});
        else
            std::printf("%-16s psnr %7.3f  ssim %.5f\n", v.name.c_str(), p, s);
    }
    const double n = double(views.size());
    if (json)
        std::cout << nlohmann::json{{"views", report}, {"mean_psnr", sp / n}, {"mean_ssim", ss / n}}.dump(2) << "\n";
    else
        std::printf("%-16s psnr %7.3f  ssim %.5f\n", "mean", sp / n, ss / n);
    return kExitOk;
}

// ---------------------------------------------------------------- bake

struct BakeOptions {
    std::string checkpoint, mesh, out;
    int resolution = 512;
};

int cmd_bake(const BakeOptions &o) {
    if (o.checkpoint.empty() || o.mesh.empty() || o.out.empty())
        throw UsageError("--checkpoint, --mesh and --out are required");
    const auto ck = open_checkpoint(o.checkpoint);
    UvMesh mesh;
    if (o.mesh.rfind("synthetic:", 0) == 0) {
        SceneSpec spec;
        spec.preset = o.mesh.substr(std::string("synthetic:").size());
        const auto prims = make_preset(spec);
        if (prims.planes.empty())
            throw ConfigError("preset has no plane to bake onto: " + spec.preset);
        mesh = plane_mesh(prims.planes.front());
    } else {
        require_path(o.mesh, "mesh");
        mesh = load_obj(o.mesh);
    }
    const auto res = bake_texture(ck.scene, mesh, o.resolution);
    if (res.degenerate_triangles > 0)
        std::cerr << "warning: skipped " << res.degenerate_triangles << " degenerate UV triangles\n";
    write_png(o.out, res.texture);
    std::cout << "baked " << res.covered_texels << " texels to " << o.out << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- info

int cmd_info(const std::string &checkpoint, bool json) {
    if (checkpoint.empty())
        throw UsageError("--checkpoint is required");
    const auto ck = open_checkpoint(checkpoint);
    const auto &sc = ck.scene;
    const auto fp = footprint(sc);
    nlohmann::json j;
    j["surfels"] = fp.surfels;
    j["geometry_bytes"] = fp.geometry_bytes;
    j["appearance_bytes"] = fp.appearance_bytes;
    j["sh_bytes"] = fp.sh_bytes;
    j["table_bytes"] = fp.table_bytes;
    j["decoder_bytes"] = fp.decoder_bytes;
    j["mode"] = scene_mode(sc) == RenderMode::Shell ? "shell" : "sh";
    if (sc.field) {
        j["field"] = {{"levels", sc.field->levels},
                      {"table_size", sc.field->table_size},
                      {"feat_dim", sc.field->feat_dim},
                      {"resolutions", sc.field->resolutions},
                      {"contract", sc.contract}};
    }
    if (sc.decoder)
        j["decoder_dims"] = sc.decoder->dims();
    if (!sc.surfels.empty()) {
        const auto an = anisotropy_stats(sc.surfels);
        j["anisotropy_mean_ratio"] = an.mean_ratio;
        j["needle_fraction"] = an.needle_fraction;
    }
    if (json) {
        std::cout << j.dump(2) << "\n";
        return kExitOk;
    }
    std::cout << "surfels           " << fp.surfels << "\n"
              << "mode              " << j["mode"].get<std::string>() << "\n"
              << "geometry bytes    " << format_bytes(fp.geometry_bytes) << "\n"
              << "appearance bytes  " << format_bytes(fp.appearance_bytes) << "\n"
              << "  sh              " << format_bytes(fp.sh_bytes) << "\n"
              << "  hash tables     " << format_bytes(fp.table_bytes) << "\n"
              << "  decoder         " << format_bytes(fp.decoder_bytes) << "\n";
    if (!sc.surfels.empty())
        std::printf("anisotropy        mean min/max ratio %.4f, needle-like (<0.1) %.2f%%\n",
                    j["anisotropy_mean_ratio"].get<double>(), 100.0 * j["needle_fraction"].get<double>());
    return kExitOk;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"shelltex: surfel geometry with a neural shell texture"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber);

    TrainOptions topt;
    auto *train = app.add_subcommand("train", "Train a scene");
    add_source_options(train, topt.src);
    train->add_option("--out", topt.out, "Output directory")->capture_default_str();
    train->add_option("--profile", topt.profile, "Configuration profile: desk or full");
    train->add_option("--iters", topt.iters, "Total iterations (split 1:2 between stages)")->check(CLI::PositiveNumber);
    train->add_option("--stage1-iters", topt.stage1, "Stage-1 (SH) iterations")->check(CLI::NonNegativeNumber);
    train->add_option("--stage2-iters", topt.stage2, "Stage-2 (shell) iterations")->check(CLI::NonNegativeNumber);
    train->add_option("--anneal-every", topt.anneal_every, "Iterations per hash level activation")
        ->check(CLI::PositiveNumber);
    train->add_option("--max-surfels", topt.max_surfels, "Densification cap (0 = unlimited)")
        ->check(CLI::NonNegativeNumber);
    train->add_option("--sh-degree", topt.sh_degree, "Stage-1 SH degree")->check(CLI::Range(0, 3));
    train->add_option("--eval-every", topt.eval_every, "Held-out evaluation interval (0 = end only)")
        ->check(CLI::NonNegativeNumber);
    train->add_option("--log-every", topt.log_every, "Progress record interval")->check(CLI::NonNegativeNumber);
    train->add_option("--seed", topt.seed, "Random seed");
    train->add_flag("--disable-feature-pos-grad", topt.no_feature_pos_grad,
                    "Do not propagate feature gradients into surfel geometry");

    RenderCmdOptions ropt;
    auto *rend = app.add_subcommand("render", "Render views of a checkpoint");
    add_source_options(rend, ropt.src);
    rend->add_option("--checkpoint", ropt.checkpoint, "Checkpoint file");
    rend->add_option("--out", ropt.out, "Output directory");
    rend->add_option("--split", ropt.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    rend->add_option("--seed", ropt.seed, "Seed for synthetic scenes");

    RenderCmdOptions eopt;
    bool eval_json = false;
    auto *eval = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint against a dataset");
    add_source_options(eval, eopt.src);
    eval->add_option("--checkpoint", eopt.checkpoint, "Checkpoint file");
    eval->add_option("--split", eopt.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
    eval->add_option("--seed", eopt.seed, "Seed for synthetic scenes");
    eval->add_flag("--json", eval_json, "JSON output");

    BakeOptions bopt;
    auto *bake = app.add_subcommand("bake", "Bake the appearance field into a UV texture");
    bake->add_option("--checkpoint", bopt.checkpoint, "Checkpoint file");
    bake->add_option("--mesh", bopt.mesh, "OBJ mesh with texture coordinates, or synthetic:<preset>");
    bake->add_option("--resolution", bopt.resolution, "Texture size in texels")->check(CLI::PositiveNumber);
    bake->add_option("--out", bopt.out, "Output PNG");

    std::string info_ckpt;
    bool info_json = false;
    auto *info = app.add_subcommand("info", "Checkpoint statistics");
    info->add_option("--checkpoint", info_ckpt, "Checkpoint file");
    info->add_flag("--json", info_json, "JSON output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    set_thread_count(threads);
    try {
        if (*train)
            return cmd_train(topt);
        if (*rend)
            return cmd_render(ropt);
        if (*eval)
            return cmd_eval(eopt, eval_json);
        if (*bake)
            return cmd_bake(bopt);
        if (*info)
            return cmd_info(info_ckpt, info_json);
    } catch (const UsageError &e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
