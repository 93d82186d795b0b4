// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage optimization: SH-colored surfels first, then surfel geometry
// jointly with the hash field and decoder.
//
#pragma once

#include "shelltex/core/errors.hpp"
#include "shelltex/core/math.hpp"
#include "shelltex/densify.hpp"
#include "shelltex/io/dataset.hpp"
#include "shelltex/io/metrics.hpp"
#include "shelltex/losses.hpp"
#include "shelltex/optim.hpp"
#include "shelltex/renderer.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <chrono>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace shelltex {

struct LearningRates {
    double position = 1.6e-4; // scaled by the scene extent
    double position_final_factor = 0.01;
    double rotation = 1e-3;
    double scale = 5e-3;
    double opacity = 5e-2;
    double sh_dc = 2.5e-3;
    double sh_rest = 2.5e-3 / 20.0;
    double table = 1e-2;
    double decoder = 1e-3;
};

struct TrainConfig {
    int stage1_iters = 10000;
    int stage2_iters = 20000;
    int anneal_every = 3000;
    LossWeights weights;            // weights.distortion < 0 picks 1000 (bounded) / 100 (unbounded)
    DistortionForm distortion_form = DistortionForm::normalized();
    bool alpha_loss = true;         // only applied to bounded scenes
    int regularize_from = 3000;     // distortion/normal terms start here (global iteration)
    DensifyConfig densify;
    int densify_every = 100;
    int densify_from = 500;
    int densify_until = 15000;
    LearningRates lr;
    int sh_degree = 3;
    HashFieldConfig field;
    int decoder_hidden = 64;
    int decoder_layers = 2;
    int init_points = 1000; // random init size when the dataset has no seed points
    double init_opacity = 0.1;
    bool orient_from_points = true;
    bool feature_pos_grad = true;
    int log_every = 100;
    int eval_every = 0; // 0: evaluate held-out views only at the end
    std::uint64_t seed = 0;
    RenderOptions render;

    /// Profile sized for a 64x64, few-thousand-iteration CPU run.
    static TrainConfig desk() {
        TrainConfig c;
        c.stage1_iters = 1000;
        c.stage2_iters = 2000;
        c.anneal_every = 250;
        c.regularize_from = 300;
        c.densify_every = 100;
        c.densify_from = 100;
        c.densify_until = 2000;
        c.densify.max_surfels = 500;
        c.field.levels = 6;
        c.field.feat_dim = 2;
        c.field.log2_table_size = 15;
        c.field.min_resolution = 8;
        c.field.max_resolution = 128;
        c.log_every = 50;
        return c;
    }

    void validate() const {
        if (stage1_iters < 0 || stage2_iters < 0 || stage1_iters + stage2_iters <= 0)
            throw ConfigError("train: iteration counts must be non-negative with a positive total");
        if (anneal_every <= 0 || densify_every <= 0)
            throw ConfigError("train: anneal_every and densify_every must be positive");
        if (weights.ssim_weight < 0 || weights.ssim_weight > 1 || weights.normal < 0 || weights.alpha < 0)
            throw ConfigError("train: loss weights must be non-negative (ssim weight in [0, 1])");
        if (sh_degree < 0 || sh_degree > kMaxShDegree)
            throw ConfigError("train: SH degree must be in [0, 3]");
        if (decoder_hidden <= 0 || decoder_layers < 0)
            throw ConfigError("train: invalid decoder shape");
        if (!(init_opacity > 0 && init_opacity < 1))
            throw ConfigError("train: initial opacity must be in (0, 1)");
        if (densify.max_surfels < 0)
            throw ConfigError("train: max_surfels must be non-negative");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["stage1_iters"] = stage1_iters;
        j["stage2_iters"] = stage2_iters;
        j["anneal_every"] = anneal_every;
        j["ssim_weight"] = weights.ssim_weight;
        j["alpha_d"] = weights.distortion;
        j["distortion_form"] = {{"mapped", distortion_form.mapped},
                                {"squared", distortion_form.squared},
                                {"near", distortion_form.near},
                                {"far", distortion_form.far}};
        j["beta_n"] = weights.normal;
        j["gamma_a"] = weights.alpha;
        j["alpha_loss"] = alpha_loss;
        j["regularize_from"] = regularize_from;
        j["densify_grad_threshold"] = densify.grad_threshold;
        j["opacity_reset_every"] = densify.reset_every;
        j["prune_freeze_after_reset"] = densify.prune_freeze;
        j["max_surfels"] = densify.max_surfels;
        j["densify_every"] = densify_every;
        j["densify_from"] = densify_from;
        j["densify_until"] = densify_until;
        j["lr"] = {{"position", lr.position},   {"position_final_factor", lr.position_final_factor},
                   {"rotation", lr.rotation},   {"scale", lr.scale},
                   {"opacity", lr.opacity},     {"sh_dc", lr.sh_dc},
                   {"sh_rest", lr.sh_rest},     {"table", lr.table},
                   {"decoder", lr.decoder}};
        j["sh_degree"] = sh_degree;
        j["field"] = {{"levels", field.levels},
                      {"log2_table_size", field.log2_table_size},
                      {"feat_dim", field.feat_dim},
                      {"min_resolution", field.min_resolution},
                      {"max_resolution", field.max_resolution}};
        j["decoder_hidden"] = decoder_hidden;
        j["decoder_layers"] = decoder_layers;
        j["orient_from_points"] = orient_from_points;
        j["feature_pos_grad"] = feature_pos_grad;
        j["seed"] = seed;
        return j;
    }
};

/// Active hash levels after `completed` stage-2 iterations: 1, 2, 3, ...
/// stepping every `anneal_every` iterations.
inline int anneal_lambda(int completed, int anneal_every) { return 1 + completed / anneal_every; }

struct TrainRecord {
    int iter = 0;
    int stage = 1;
    double loss = 0, rgb = 0, distortion = 0, normal = 0, alpha = 0;
    double psnr = 0;      // current training view
    double test_psnr = -1; // mean over held-out views, when evaluated
    std::size_t surfels = 0;
    int lambda = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"iter", iter},       {"stage", stage},         {"loss", loss},
                         {"l_rgb", rgb},       {"l_dist", distortion},   {"l_normal", normal},
                         {"l_alpha", alpha},   {"psnr", psnr},           {"surfel_count", surfels},
                         {"lambda", lambda}};
        if (test_psnr >= 0)
            j["test_psnr"] = test_psnr;
        return j;
    }
};

/// Loss of one rendered view and its upstream gradients. `alpha_target`
/// may be empty (no alpha term); `regularize` enables distortion and normal
/// terms.
template <class T> struct ViewLoss {
    LossTerms terms;
    double total = 0.0;
    PixelGrads<T> pixel;
    HitGrads<T> hit;
};

template <class T>
ViewLoss<T> view_loss(const RenderOutput<T> &r, const Camera &cam, std::span<const T> target,
                      std::span<const T> alpha_target, const LossWeights &w, bool regularize,
                      const DistortionForm &form = {}) {
    ViewLoss<T> out;
    auto lrgb = loss_rgb<T>(r.rgb, target, cam.width, cam.height, w.ssim_weight);
    out.terms.rgb = double(lrgb.value);
    out.pixel.rgb = std::move(lrgb.grad);
    if (regularize && w.distortion > 0) {
        out.terms.distortion = double(loss_distortion(r, &out.hit, form));
        for (auto &g : out.hit.weight)
            g *= T(w.distortion);
        for (auto &g : out.hit.depth)
            g *= T(w.distortion);
    }
    if (regularize && w.normal > 0) {
        auto ln = loss_normal<T>(r.normal, r.depth, r.alpha, cam);
        out.terms.normal = double(ln.value);
        out.pixel.normal = std::move(ln.grad_normal);
        out.pixel.depth = std::move(ln.grad_depth);
        for (auto &g : out.pixel.normal)
            g *= T(w.normal);
        for (auto &g : out.pixel.depth)
            g *= T(w.normal);
    }
    if (!alpha_target.empty() && w.alpha > 0) {
        auto la = loss_alpha<T>(r.alpha, alpha_target);
        out.terms.alpha = double(la.value);
        out.pixel.alpha = std::move(la.grad);
        for (auto &g : out.pixel.alpha)
            g *= T(w.alpha);
    }
    out.total = total_loss(out.terms, w);
    return out;
}

template <class T> RenderMode scene_mode(const Scene<T> &s) {
    return (s.field && s.decoder) ? RenderMode::Shell : RenderMode::Sh;
}

struct ViewScore {
    std::string name;
    double psnr = 0, ssim = 0;
};

/// Renders every view and scores it against its (background-composited) image.
template <class T>
std::vector<ViewScore> evaluate_views(const Scene<T> &scene, const std::vector<View> &views,
                                      const Eigen::Vector3d &background, const RenderOptions &opt = {}) {
    std::vector<ViewScore> out;
    for (const auto &v : views) {
        const auto r = render(scene, v.camera, scene_mode(scene), opt, false);
        const auto gt = view_rgb(v, background);
        std::vector<float> pred(r.rgb.begin(), r.rgb.end());
        out.push_back({v.name, psnr<float>(pred, gt), ssim_metric<float>(pred, gt, v.camera.width, v.camera.height, 3)});
    }
    return out;
}

inline double mean_psnr(const std::vector<ViewScore> &s) {
    double acc = 0;
    for (const auto &v : s)
        acc += v.psnr;
    return s.empty() ? 0.0 : acc / double(s.size());
}

/// Surfels seeded from points (or random points in the bound). Scale is the
/// mean distance to the 3 nearest neighbours; with `orient_from_points` the
/// tangent frame comes from the principal axes of the 8 nearest neighbours,
/// otherwise the orientation is random.
inline std::vector<Surfel<float>> init_surfels(const Dataset &ds, const TrainConfig &cfg, Rng &rng) {
    std::vector<SeedPoint> pts = ds.points;
    if (pts.empty()) {
        const double half = ds.kind == SceneKind::Bounded ? 0.5 * cfg.field.bound : 1.0;
        for (int i = 0; i < cfg.init_points; ++i) {
            SeedPoint p;
            p.position = Eigen::Vector3d(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half));
            p.color = Eigen::Vector3d(rng.uniform(), rng.uniform(), rng.uniform());
            pts.push_back(p);
        }
    }
    if (pts.empty())
        throw ConfigError("train: no initial points");
    const std::size_t cap = cfg.densify.max_surfels > 0 ? std::size_t(cfg.densify.max_surfels) : pts.size();
    if (pts.size() > cap) {
        // Seeded subset, kept in input order.
        std::vector<std::size_t> idx(pts.size());
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        for (std::size_t i = 0; i < cap; ++i)
            std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        idx.resize(cap);
        std::sort(idx.begin(), idx.end());
        std::vector<SeedPoint> kept;
        for (std::size_t i : idx)
            kept.push_back(pts[i]);
        pts = std::move(kept);
    }
    constexpr int kFrameNeighbours = 8;
    std::vector<Surfel<float>> out;
    const int K = sh_coeff_count(cfg.sh_degree);
    std::vector<std::pair<double, std::size_t>> near;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        near.clear();
        for (std::size_t j = 0; j < pts.size(); ++j)
            if (j != i)
                near.emplace_back((pts[i].position - pts[j].position).squaredNorm(), j);
        const std::size_t kk = std::min<std::size_t>(kFrameNeighbours, near.size());
        std::partial_sort(near.begin(), near.begin() + kk, near.end());
        double mean = 0;
        const std::size_t n3 = std::min<std::size_t>(3, kk);
        for (std::size_t k = 0; k < n3; ++k)
            mean += near[k].first;
        const double dist = n3 ? std::sqrt(std::max(mean / double(n3), 1e-10)) : 0.01;

        Surfel<float> s;
        s.position = pts[i].position.cast<float>();
        Vec4<float> q(float(rng.normal()), float(rng.normal()), float(rng.normal()), float(rng.normal()));
        s.rotation = q / q.norm();
        if (cfg.orient_from_points && kk >= 3) {
            Eigen::Vector3d c = pts[i].position;
            for (std::size_t k = 0; k < kk; ++k)
                c += pts[near[k].second].position;
            c /= double(kk + 1);
            Eigen::Matrix3d cov = (pts[i].position - c) * (pts[i].position - c).transpose();
            for (std::size_t k = 0; k < kk; ++k) {
                const Eigen::Vector3d d = pts[near[k].second].position - c;
                cov += d * d.transpose();
            }
            const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
            Eigen::Matrix3d R;
            R.col(0) = es.eigenvectors().col(2);
            R.col(1) = es.eigenvectors().col(1);
            R.col(2) = R.col(0).cross(R.col(1));
            const Eigen::Quaterniond qd(R);
            s.rotation = Vec4<float>(float(qd.w()), float(qd.x()), float(qd.y()), float(qd.z()));
        }
        s.log_scale = Vec2<float>::Constant(float(std::log(dist)));
        s.opacity_logit = logit(float(cfg.init_opacity));
        s.sh.assign(3 * K, 0.0f);
        for (int c = 0; c < 3; ++c)
            s.sh[c] = float((pts[i].color[c] - 0.5) / sh_const::C0);
        out.push_back(std::move(s));
    }
    return out;
}

struct TrainResult {
    Scene<float> scene;
    std::vector<TrainRecord> log;
    double train_psnr = 0, test_psnr = 0;
    double seconds = 0;
};

using ProgressFn = std::function<void(const TrainRecord &)>;

namespace detail {

inline std::vector<double> surfel_lr_pattern(const LearningRates &lr, int stride, double pos_lr) {
    std::vector<double> p(stride, 0.0);
    for (int k = 0; k < 3; ++k)
        p[Surfel<float>::kPos + k] = pos_lr;
    for (int k = 0; k < 4; ++k)
        p[Surfel<float>::kRot + k] = lr.rotation;
    p[Surfel<float>::kScale] = p[Surfel<float>::kScale + 1] = lr.scale;
    p[Surfel<float>::kOpacity] = lr.opacity;
    for (int k = Surfel<float>::kSh; k < stride; ++k)
        p[k] = (k - Surfel<float>::kSh) < 3 ? lr.sh_dc : lr.sh_rest;
    return p;
}

} // namespace detail

class Trainer {
public:
    Trainer(const Dataset &ds, const TrainConfig &cfg) : mData(ds), mCfg(cfg), mRng(cfg.seed) {
        mCfg.validate();
        mData.validate();
        if (mCfg.weights.distortion < 0)
            mCfg.weights.distortion = ds.kind == SceneKind::Bounded ? 1000.0 : 100.0;
        for (const auto &v : mData.train)
            mTargets.push_back(view_rgb(v, mData.background));
        mExtent = mData.camera_extent();
        mScene.background = mData.background.cast<float>();
        mScene.surfels = init_surfels(mData, mCfg, mRng);
        mScene.sh_degree = mCfg.sh_degree;
        if (mCfg.stage1_iters == 0)
            begin_stage2();
        reset_surfel_optimizer();
        mStats.reset(mScene.surfels.size());
    }

    const Scene<float> &scene() const { return mScene; }
    const TrainConfig &config() const { return mCfg; }
    int iteration() const { return mIter; }
    int total_iters() const { return mCfg.stage1_iters + mCfg.stage2_iters; }
    bool done() const { return mIter >= total_iters(); }

    /// Runs one iteration; returns the record of that step.
    TrainRecord step() {
        if (done())
            throw StateError("train: no iterations left");
        const int iter = ++mIter;
        const int stage = iter <= mCfg.stage1_iters ? 1 : 2;
        if (stage == 2 && !mStage2)
            begin_stage2();
        if (stage == 2)
            mScene.anneal.lambda = anneal_lambda(iter - mCfg.stage1_iters - 1, mCfg.anneal_every);

        if (mOrderPos >= mOrder.size()) {
            mOrder.resize(mData.train.size());
            std::iota(mOrder.begin(), mOrder.end(), 0);
            for (std::size_t i = mOrder.size(); i > 1; --i)
                std::swap(mOrder[i - 1], mOrder[mRng.below(i)]);
            mOrderPos = 0;
        }
        const int vi = mOrder[mOrderPos++];
        const View &view = mData.train[vi];
        const Camera &cam = view.camera;
        const RenderMode mode = scene_mode(mScene);
        const auto r = render(mScene, cam, mode, mCfg.render, true);

        TrainRecord rec;
        rec.iter = iter;
        rec.stage = stage;
        const bool regularize = iter >= mCfg.regularize_from;
        const std::span<const float> alpha_target =
            stage == 2 && !mAlphaTargets.empty() ? std::span<const float>(mAlphaTargets[vi]) : std::span<const float>();
        const auto vl =
            view_loss<float>(r, cam, mTargets[vi], alpha_target, mCfg.weights, regularize, mCfg.distortion_form);
        rec.rgb = vl.terms.rgb;
        rec.distortion = vl.terms.distortion;
        rec.normal = vl.terms.normal;
        rec.alpha = vl.terms.alpha;
        rec.loss = vl.total;
        rec.psnr = psnr<float>(r.rgb, mTargets[vi]);

        BackwardOptions bopt;
        bopt.feature_pos_grad = mCfg.feature_pos_grad;
        const auto grads = render_backward(mScene, cam, r, vl.pixel, vl.hit, bopt, mCfg.render);

        apply_gradients(grads, iter, stage);
        mStats.add<float>(grads.viewspace, grads.visible);

        if (iter >= mCfg.densify_from && iter <= mCfg.densify_until && iter % mCfg.densify_every == 0) {
            const auto res = densify_and_prune(mScene.surfels, mStats, iter, mExtent, mCfg.densify, mRng);
            mSurfelAdam.remap_rows(res.source, mSurfelStride);
            mStats.reset(mScene.surfels.size());
        }

        rec.surfels = mScene.surfels.size();
        rec.lambda = stage == 2 ? mScene.anneal.lambda : 0;
        if (mCfg.eval_every > 0 && iter % mCfg.eval_every == 0)
            rec.test_psnr = mean_psnr(evaluate_views(mScene, mData.test, mData.background, mCfg.render));
        return rec;
    }

    /// Runs to completion. Records are kept every log_every iterations and
    /// at the last iteration.
    TrainResult run(const ProgressFn &progress = {}) {
        const auto t0 = std::chrono::steady_clock::now();
        TrainResult out;
        while (!done()) {
            TrainRecord rec = step();
            const bool last = done();
            if (last && rec.test_psnr < 0)
                rec.test_psnr = mean_psnr(evaluate_views(mScene, mData.test, mData.background, mCfg.render));
            if (last || (mCfg.log_every > 0 && rec.iter % mCfg.log_every == 0) || rec.test_psnr >= 0) {
                out.log.push_back(rec);
                if (progress)
                    progress(rec);
            }
        }
        out.scene = mScene;
        out.train_psnr = mean_psnr(evaluate_views(mScene, mData.train, mData.background, mCfg.render));
        out.test_psnr = out.log.empty() ? 0.0 : out.log.back().test_psnr;
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

private:
    void reset_surfel_optimizer() {
        mSurfelStride = mScene.surfels.empty() ? Surfel<float>::kGeometryParams : mScene.surfels.front().param_count();
        mSurfelAdam = AdamState<float>(mScene.surfels.size() * mSurfelStride);
    }

    void begin_stage2() {
        mStage2 = true;
        const bool bounded = mData.kind == SceneKind::Bounded;
        if (bounded && mCfg.alpha_loss && mCfg.weights.alpha > 0 && mCfg.stage1_iters > 0) {
            for (const auto &v : mData.train) {
                const auto r = render(mScene, v.camera, RenderMode::Sh, mCfg.render, false);
                mAlphaTargets.push_back(r.alpha);
            }
        }
        const int old_stride = mSurfelStride;
        for (auto &s : mScene.surfels)
            s.sh.clear();
        mScene.sh_degree = -1;
        HashFieldConfig fc = mCfg.field;
        if (!bounded)
            fc.bound = 2.0;
        mScene.contract = !bounded;
        mScene.field = HashField<float>::create(fc, mRng);
        mScene.decoder = Decoder<float>::standard(mScene.field->output_dim(), mRng, mCfg.decoder_hidden,
                                                  mCfg.decoder_layers);
        mScene.anneal.lambda = 1;
        mTableAdam = AdamState<float>(mScene.field->tables.size());
        mDecoderAdam = AdamState<float>(mScene.decoder->param_count());
        if (old_stride > 0 && mSurfelAdam.size() == mScene.surfels.size() * std::size_t(old_stride)) {
            // Keep geometry moments, drop the SH slots.
            AdamState<float> next(mScene.surfels.size() * Surfel<float>::kGeometryParams);
            for (std::size_t i = 0; i < mScene.surfels.size(); ++i)
                for (int k = 0; k < Surfel<float>::kGeometryParams; ++k) {
                    next.m[i * Surfel<float>::kGeometryParams + k] = mSurfelAdam.m[i * old_stride + k];
                    next.v[i * Surfel<float>::kGeometryParams + k] = mSurfelAdam.v[i * old_stride + k];
                }
            next.step = mSurfelAdam.step;
            mSurfelAdam = std::move(next);
        }
        mSurfelStride = Surfel<float>::kGeometryParams;
    }

    double position_lr(int iter, int stage) const {
        const int len = stage == 1 ? mCfg.stage1_iters : mCfg.stage2_iters;
        const int k = stage == 1 ? iter - 1 : iter - mCfg.stage1_iters - 1;
        const double frac = len > 1 ? double(k) / double(len - 1) : 1.0;
        return mCfg.lr.position * mExtent * std::pow(mCfg.lr.position_final_factor, frac);
    }

    void apply_gradients(const SceneGrads<float> &g, int iter, int stage) {
        const std::size_t n = mScene.surfels.size();
        const int stride = mSurfelStride;
        if (g.stride != stride)
            throw StateError("train: gradient layout does not match the optimizer");
        std::vector<float> params(n * stride);
        for (std::size_t i = 0; i < n; ++i)
            mScene.surfels[i].write_params(params.data() + i * stride);
        const auto pattern = detail::surfel_lr_pattern(mCfg.lr, stride, position_lr(iter, stage));
        adam_step<float>(params, g.surfels, mSurfelAdam, pattern);
        for (std::size_t i = 0; i < n; ++i) {
            auto &s = mScene.surfels[i];
            s.read_params(params.data() + i * stride);
            const float qn = s.rotation.norm();
            s.rotation = qn > 0 ? Vec4<float>(s.rotation / qn) : Vec4<float>(1, 0, 0, 0);
        }
        if (stage == 2) {
            adam_step<float>(mScene.field->tables, g.table, mTableAdam, mCfg.lr.table);
            adam_step<float>(mScene.decoder->params(), g.decoder, mDecoderAdam, mCfg.lr.decoder);
        }
    }

    Dataset mData;
    TrainConfig mCfg;
    Rng mRng;
    Scene<float> mScene;
    std::vector<std::vector<float>> mTargets, mAlphaTargets;
    double mExtent = 1.0;
    int mIter = 0;
    bool mStage2 = false;
    std::vector<int> mOrder;
    std::size_t mOrderPos = 0;
    int mSurfelStride = 0;
    AdamState<float> mSurfelAdam, mTableAdam, mDecoderAdam;
    DensifyStats mStats;
};

inline TrainResult train(const Dataset &ds, const TrainConfig &cfg, const ProgressFn &progress = {}) {
    Trainer t(ds, cfg);
    return t.run(progress);
}

} // namespace shelltex
