// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
//
#include "test_support.hpp"

#include <CLI11.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

using namespace shelltex;
using namespace shelltex::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char *f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------- 1

Verdict gradient_audit_criterion() {
    const auto t0 = std::chrono::steady_clock::now();
    double max_err = 0;
    int params = 0, failures = 0;
    std::set<std::string> groups;
    auto absorb = [&](const AuditReport &r) {
        max_err = std::max(max_err, r.max_rel_error);
        failures += r.failures;
        params += int(r.samples.size());
        for (const auto &s : r.samples)
            groups.insert(s.group);
    };
    {
        const auto sc = micro_shell_scene(21, 8);
        Rng rng(121);
        const auto target = random_image(rng, 8 * 8 * 3);
        const auto alpha_target = random_image(rng, 8 * 8);
        absorb(gradient_audit(sc, micro_camera(8), target, alpha_target, LossWeights{}, true, 80, 21));
    }
    {
        const auto sc = micro_sh_scene(22, 6, 2);
        Rng rng(122);
        const auto target = random_image(rng, 8 * 8 * 3);
        absorb(gradient_audit(sc, micro_camera(8), target, {}, LossWeights{}, true, 0, 22));
    }
    const double secs = seconds_since(t0);
    std::string names;
    for (const auto &g : groups)
        names += (names.empty() ? "" : ",") + g;
    return {params >= 200 && failures == 0 && max_err < 1e-4 && secs < 60.0 && groups.size() == 7,
            fmt("%d params over {%s}, max rel err %.2e (< 1e-4), %.1f s (< 60 s)", params, names.c_str(), max_err,
                secs)};
}

// ---------------------------------------------------------------- 2

Verdict conservation_criterion() {
    Rng rng(2);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + int(rng.below(64));
        std::vector<Hit<double>> hits(n);
        for (auto &h : hits) {
            h.alpha_eff = rng.uniform(0.0, 0.99);
            h.t = rng.uniform(0.1, 10.0);
        }
        const auto b = blend_front_to_back<double>(hits, std::vector<double>(n, 0.0), 1);
        double wsum = 0;
        for (const auto &h : hits)
            wsum += h.alpha_eff * h.transmittance;
        worst = std::max({worst, std::abs(wsum + b.final_transmittance - 1.0),
                          std::abs(b.alpha + b.final_transmittance - 1.0)});
    }
    std::vector<Hit<double>> two(2);
    two[0].alpha_eff = two[1].alpha_eff = 0.5;
    two[0].t = 1.0;
    two[1].t = 2.0;
    const std::vector<double> f{0.8, 0.2, 0.4, 0.6};
    const auto b = blend_front_to_back<double>(two, f, 2);
    const bool exact = b.value[0] == 0.5 * 0.8 + 0.25 * 0.4 && b.value[1] == 0.5 * 0.2 + 0.25 * 0.6;
    return {worst < 1e-6 && exact,
            fmt("1000 configs, max |sum w + T - 1| %.1e (< 1e-6); two-splat example %s", worst,
                exact ? "exact" : "MISMATCH")};
}

// ---------------------------------------------------------------- 3

std::vector<double> oracle_level(const Vec3<double> &x, const HashField<double> &f, int level,
                                 std::map<std::size_t, double> *weights = nullptr) {
    const int n = f.resolutions[level];
    const int stride = n + 1;
    std::array<int, 3> i0;
    std::array<double, 3> t;
    for (int a = 0; a < 3; ++a) {
        const double pos = (x[a] + f.bound) / (2.0 * f.bound) * n;
        i0[a] = std::clamp(int(std::floor(pos)), 0, n - 1);
        t[a] = pos - i0[a];
    }
    std::vector<double> out(f.feat_dim, 0.0);
    for (int di = 0; di <= 1; ++di)
        for (int dj = 0; dj <= 1; ++dj)
            for (int dk = 0; dk <= 1; ++dk) {
                const double w = (di ? t[0] : 1 - t[0]) * (dj ? t[1] : 1 - t[1]) * (dk ? t[2] : 1 - t[2]);
                // Dense grid: plain row-major vertex index, no hashing.
                const std::size_t vertex =
                    (std::size_t(i0[0] + di) * stride + std::size_t(i0[1] + dj)) * stride + std::size_t(i0[2] + dk);
                const std::size_t off = f.entry_offset(level, vertex);
                for (int k = 0; k < f.feat_dim; ++k) {
                    out[k] += w * f.tables[off + k];
                    if (weights)
                        (*weights)[off + k] += w;
                }
            }
    return out;
}

Verdict hash_oracle_criterion() {
    Rng rng(3);
    HashFieldConfig c;
    c.levels = 4;
    c.log2_table_size = 13;
    c.feat_dim = 2;
    c.min_resolution = 4;
    c.max_resolution = 16;
    c.init_range = 1.0;
    const auto f = HashField<double>::create(c, rng);
    for (int l = 0; l < f.levels; ++l)
        if (!f.dense(l))
            return {false, "test field is not dense on every level"};
    double fwd = 0, bwd = 0;
    for (int i = 0; i < 2000; ++i) {
        const Vec3<double> x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const auto enc = encode(x, f, AnnealState::all());
        std::vector<double> up(f.output_dim());
        for (auto &u : up)
            u = rng.normal();
        const auto g = encode_backward(x, f, AnnealState::all(), std::span<const double>(up));
        std::map<std::size_t, double> got, want;
        for (std::size_t k = 0; k < g.table.index.size(); ++k)
            got[g.table.index[k]] += g.table.value[k];
        for (int l = 0; l < f.levels; ++l) {
            std::map<std::size_t, double> w;
            const auto ref = oracle_level(x, f, l, &w);
            for (int k = 0; k < f.feat_dim; ++k)
                fwd = std::max(fwd, std::abs(enc[l * f.feat_dim + k] - ref[k]));
            for (const auto &[idx, wt] : w)
                want[idx] += wt * up[l * f.feat_dim + (idx - f.level_offset(l)) % f.feat_dim];
        }
        for (const auto &[idx, v] : want) {
            const auto it = got.find(idx);
            bwd = std::max(bwd, std::abs(v - (it == got.end() ? 0.0 : it->second)));
        }
        for (const auto &[idx, v] : got)
            if (!want.contains(idx))
                bwd = std::max(bwd, std::abs(v));
    }

    HashFieldConfig c6;
    c6.levels = 6;
    c6.log2_table_size = 14;
    c6.feat_dim = 2;
    c6.min_resolution = 4;
    c6.max_resolution = 64;
    c6.init_range = 1.0;
    const auto f6 = HashField<double>::create(c6, rng);
    AnnealState an;
    an.lambda = 2;
    bool masked = true;
    for (int i = 0; i < 1000 && masked; ++i) {
        const Vec3<double> x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const auto enc = encode(x, f6, an);
        const auto full = encode(x, f6, AnnealState::all());
        for (int l = 0; l < 6; ++l)
            for (int k = 0; k < 2; ++k)
                masked &= l >= 3 ? enc[l * 2 + k] == 0.0 : enc[l * 2 + k] == full[l * 2 + k];
        std::vector<double> up(f6.output_dim(), 1.0);
        for (std::size_t idx : encode_backward(x, f6, an, std::span<const double>(up)).table.index)
            masked &= idx < f6.level_offset(3);
    }
    return {fwd < 1e-7 && bwd < 1e-7 && masked,
            fmt("encode max err %.1e, table grad max err %.1e (< 1e-7) on %d dense levels; lambda=2 L=6 %s", fwd,
                bwd, f.levels, masked ? "zeroes levels 3-5" : "LEAKS masked levels")};
}

// ---------------------------------------------------------------- 4

Verdict contraction_criterion() {
    Rng rng(4);
    int identity_bad = 0, far_bad = 0;
    double far_lo = 2, far_hi = 0;
    for (int i = 0; i < 10000; ++i) {
        Vec3<double> x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        if (x.norm() > 1.0)
            x /= 1.0001 * x.norm();
        identity_bad += contract(x) != x;
    }
    for (int i = 0; i < 10000; ++i) {
        const Vec3<double> x =
            Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized() * std::exp(rng.uniform(std::log(10.0001), std::log(1e8)));
        const double r = contract(x).norm();
        far_lo = std::min(far_lo, r);
        far_hi = std::max(far_hi, r);
        far_bad += !(r > 1.9 && r < 2.0);
    }
    bool continuous = true;
    for (int i = 0; i < 1000; ++i) {
        const Vec3<double> d = Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized();
        continuous &= contract(d) == d;
        continuous &= (contract(Vec3<double>(d * (1 + 1e-12))) - d).norm() < 1e-11;
    }
    return {identity_bad == 0 && far_bad == 0 && continuous,
            fmt("identity failures %d/10000; far norms in [%.6f, %.6f] (need (1.9, 2)); unit sphere %s", identity_bad,
                far_lo, far_hi, continuous ? "continuous" : "DISCONTINUOUS")};
}

// ---------------------------------------------------------------- 5..10

struct Run {
    TrainResult result;
    std::vector<char> checkpoint;
    double seconds = 0;
};

SceneSpec overfit_spec(std::uint64_t seed) {
    SceneSpec spec; // checker-plane-sphere, 64 x 64, 20 train views
    spec.seed = seed;
    return spec;
}

Run train_run(const Dataset &ds, const TrainConfig &cfg, int threads, const std::string &label) {
    set_thread_count(threads);
    std::fprintf(stderr, "[%s] training %d+%d iterations, %d thread(s)\n", label.c_str(), cfg.stage1_iters,
                 cfg.stage2_iters, threads);
    const auto t0 = std::chrono::steady_clock::now();
    Run r;
    Trainer t(ds, cfg);
    r.result = t.run([&](const TrainRecord &rec) {
        if (rec.test_psnr >= 0 || rec.iter % 500 == 0)
            std::fprintf(stderr, "[%s] iter %d psnr %.2f surfels %zu\n", label.c_str(), rec.iter, rec.psnr,
                         rec.surfels);
    });
    r.seconds = seconds_since(t0);
    r.checkpoint = serialize_checkpoint(r.result.scene);
    set_thread_count(0);
    std::fprintf(stderr, "[%s] train %.2f dB, test %.2f dB, %zu surfels, %.0f s\n", label.c_str(),
                 r.result.train_psnr, r.result.test_psnr, r.result.scene.surfels.size(), r.seconds);
    return r;
}

Verdict overfit_criterion(const Run &r) {
    const auto &res = r.result;
    return {res.train_psnr >= 30.0 && res.test_psnr >= 25.0 && res.scene.surfels.size() <= 500,
            fmt("train %.2f dB (>= 30), held-out %.2f dB (>= 25), %zu surfels (<= 500), %d iterations, %.0f s",
                res.train_psnr, res.test_psnr, res.scene.surfels.size(), TrainConfig::desk().stage1_iters +
                                                                             TrainConfig::desk().stage2_iters,
                r.seconds)};
}

Verdict decoupling_criterion(std::uint64_t seed, int threads) {
    SceneSpec spec;
    spec.preset = "hf-checker-plane";
    spec.seed = seed;
    const Dataset ds = generate_scene(spec).dataset;
    TrainConfig shell = TrainConfig::desk();
    shell.densify.max_surfels = 100;
    shell.seed = seed;
    TrainConfig sh = shell;
    sh.stage1_iters += sh.stage2_iters;
    sh.stage2_iters = 0;
    sh.sh_degree = 3;
    const auto a = train_run(ds, shell, threads, "C6 shell");
    const auto b = train_run(ds, sh, threads, "C6 sh");
    const double margin = a.result.test_psnr - b.result.test_psnr;
    const std::size_t na = a.result.scene.surfels.size(), nb = b.result.scene.surfels.size();
    return {margin >= 3.0 && na <= 100 && nb <= 100,
            fmt("shell %.2f dB vs sh(3) %.2f dB held-out, margin %.2f dB (>= 3); surfels %zu / %zu (<= 100)",
                a.result.test_psnr, b.result.test_psnr, margin, na, nb)};
}

Verdict footprint_criterion(const Run &r, const std::string &cli, const fs::path &work) {
    const auto &sc = r.result.scene;
    Scene<float> bare = sc;
    bare.surfels.clear();
    const std::size_t n = sc.surfels.size();
    const std::size_t block = r.checkpoint.size() - serialize_checkpoint(bare).size();
    const auto fp = footprint(sc);
    std::string detail = fmt("%zu surfels, geometry block %zu bytes (= 40 x %zu: %s)", n, block, n,
                             block == 40 * n ? "yes" : "NO");
    bool pass = block == 40 * n && fp.geometry_bytes == 40 * n;
    if (cli.empty())
        return {false, detail + "; no CLI path given for the info check"};
    fs::create_directories(work);
    const auto path = work / "c5.shtx";
    save_checkpoint(sc, path.string());
    const std::string cmd = "\"" + cli + "\" info --json --checkpoint \"" + path.string() + "\"";
    std::unique_ptr<FILE, int (*)(FILE *)> pipe(popen(cmd.c_str(), "r"), pclose);
    std::string text;
    if (pipe) {
        std::array<char, 4096> buf;
        std::size_t got;
        while ((got = std::fread(buf.data(), 1, buf.size(), pipe.get())) > 0)
            text.append(buf.data(), got);
    }
    try {
        const auto j = nlohmann::json::parse(text);
        const auto geo = j.at("geometry_bytes").get<std::size_t>();
        const auto app = j.at("appearance_bytes").get<std::size_t>();
        pass &= geo == 40 * n && app == fp.appearance_bytes && app > 0;
        detail += fmt("; info reports geometry %zu B, appearance %zu B", geo, app);
    } catch (const std::exception &e) {
        pass = false;
        detail += std::string("; info output unreadable: ") + e.what();
    }
    return {pass, detail};
}

Verdict bake_criterion(const Run &r, const GeneratedScene &gen) {
    const auto &sc = r.result.scene;
    const UvMesh mesh = plane_mesh(gen.scene.planes.front());
    const auto baked = bake_texture(sc, mesh, 512);
    const View &view = gen.dataset.train.front();
    const Camera &cam = view.camera;
    const auto tex = render_textured_mesh(mesh, baked.texture, cam, gen.dataset.background);
    const auto splat = render(sc, cam, scene_mode(sc), RenderOptions{}, false);
    // Compare where the pixel center sees the plane; sphere-covered pixels
    // are not part of the plane mesh.
    std::vector<std::uint8_t> mask(tex.mask.size(), 0);
    std::size_t covered = 0;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const std::size_t p = std::size_t(y) * cam.width + x;
            const auto hit = gen.scene.trace(cam.origin(), cam.pixel_ray(x, y));
            mask[p] = tex.mask[p] && hit && hit->primitive == 0;
            covered += mask[p];
        }
    if (covered == 0)
        return {false, "plane not visible in the chosen view"};
    const std::vector<float> pred(splat.rgb.begin(), splat.rgb.end());
    const double p = psnr_masked<float>(tex.image.data, pred, mask, 3);
    return {p >= 25.0, fmt("textured vs splat render of %s: %.2f dB (>= 25) over %zu plane pixels, 512^2 texture",
                           view.name.c_str(), p, covered)};
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"shelltex acceptance run"};
    std::string cli, work = "acceptance_work", only;
    std::uint64_t seed = 0;
    int threads_a = 1, threads_b = 4;
    app.add_option("--cli", cli, "Path to the shelltex executable (for the info check)");
    app.add_option("--work", work, "Scratch directory");
    app.add_option("--seed", seed, "Training seed");
    app.add_option("--only", only, "Comma-separated criterion numbers to run (default: all)");
    app.add_option("--threads-a", threads_a, "Thread count of the main overfit run");
    app.add_option("--threads-b", threads_b, "Thread count of the determinism rerun");
    CLI11_PARSE(app, argc, argv);

    std::set<int> wanted;
    {
        std::stringstream ss(only);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty())
                wanted.insert(std::stoi(tok));
    }
    auto want = [&](int c) { return wanted.empty() || wanted.contains(c); };

    fs::create_directories(work);
    std::ofstream summary(fs::path(work) / "report.txt");
    int failed = 0;
    auto report = [&](int c, const char *name, const Verdict &v) {
        const std::string line = fmt("C%-2d %s  %-22s %s", c, v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
        summary << line << std::endl;
        failed += !v.pass;
    };
    auto guarded = [&](int c, const char *name, auto &&fn) {
        if (!want(c))
            return;
        try {
            report(c, name, fn());
        } catch (const std::exception &e) {
            report(c, name, {false, std::string("exception: ") + e.what()});
        }
    };

    guarded(1, "gradient audit", gradient_audit_criterion);
    guarded(2, "blend conservation", conservation_criterion);
    guarded(3, "hash-field oracle", hash_oracle_criterion);
    guarded(4, "contraction", contraction_criterion);

    const bool need_main = want(5) || want(7) || want(8) || want(9) || want(10);
    std::optional<GeneratedScene> gen;
    std::optional<Run> main_run;
    TrainConfig cfg = TrainConfig::desk();
    cfg.seed = seed;
    if (need_main) {
        try {
            gen = generate_scene(overfit_spec(seed));
            main_run = train_run(gen->dataset, cfg, threads_a, "C5");
        } catch (const std::exception &e) {
            std::fprintf(stderr, "overfit run failed: %s\n", e.what());
        }
    }
    auto with_main = [&](auto &&fn) {
        return [&, fn]() -> Verdict {
            if (!main_run)
                return {false, "overfit run did not complete"};
            return fn();
        };
    };

    guarded(5, "overfit convergence", with_main([&] { return overfit_criterion(*main_run); }));
    guarded(6, "decoupling benefit", [&] { return decoupling_criterion(seed, threads_a); });
    guarded(7, "ablation parity", with_main([&] {
                TrainConfig ablated = cfg;
                ablated.feature_pos_grad = false;
                const auto b = train_run(gen->dataset, ablated, threads_a, "C7 ablated");
                const double full = main_run->result.test_psnr, abl = b.result.test_psnr;
                return Verdict{abl < full, fmt("held-out full %.3f dB vs without feature-position gradient %.3f dB "
                                               "(margin %.3f, must be > 0)",
                                               full, abl, full - abl)};
            }));
    guarded(8, "geometry footprint", with_main([&] { return footprint_criterion(*main_run, cli, fs::path(work)); }));
    guarded(9, "bake fidelity", with_main([&] { return bake_criterion(*main_run, *gen); }));
    guarded(10, "determinism", with_main([&] {
                const auto b = train_run(gen->dataset, cfg, threads_b, "C10 rerun");
                const bool same = b.checkpoint == main_run->checkpoint;
                return Verdict{same, fmt("seed %llu with %d vs %d threads: checkpoints %s (%zu bytes)",
                                         static_cast<unsigned long long>(seed), threads_a, threads_b,
                                         same ? "bit-identical" : "DIFFER", b.checkpoint.size())};
            }));

    std::printf("%s: %d criterion(s) failed\n", failed ? "FAIL" : "PASS", failed);
    summary << (failed ? "FAIL" : "PASS") << ": " << failed << " criterion(s) failed" << std::endl;
    return failed ? 1 : 0;
}
