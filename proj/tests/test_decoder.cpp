// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace shelltex;
using namespace shelltex::testing;

namespace {

Vec3<double> random_dir(Rng &rng) { return Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized(); }

std::vector<double> random_vec(Rng &rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto &x : v)
        x = rng.normal() * scale;
    return v;
}

} // namespace

TEST(EncodeDir, ConstantBand) {
    Rng rng(1);
    for (int i = 0; i < 50; ++i)
        EXPECT_NEAR(encode_dir(random_dir(rng))[0], 0.28209479, 1e-8);
}

TEST(EncodeDir, AzimuthalTermsVanishOnZAxis) {
    const auto b = encode_dir(Vec3<double>(0, 0, 1));
    // Band l occupies indices l^2 .. l^2 + 2l, m = 0 in the middle.
    for (int l = 1; l <= kMaxShDegree; ++l)
        for (int m = -l; m <= l; ++m)
            if (m != 0)
                EXPECT_NEAR(b[l * l + l + m], 0.0, 1e-15) << l << "," << m;
    EXPECT_NE(b[2], 0.0);
}

TEST(EncodeDir, NonUnitRejected) { EXPECT_THROW(encode_dir(Vec3<double>(0, 0, 2)), DomainError); }

TEST(EncodeDir, BandParity) {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
        const Vec3<double> d = random_dir(rng);
        const auto a = encode_dir(d), b = encode_dir(Vec3<double>(-d));
        for (int l = 0; l <= kMaxShDegree; ++l)
            for (int k = l * l; k < (l + 1) * (l + 1); ++k)
                EXPECT_NEAR(b[k], (l % 2 ? -1.0 : 1.0) * a[k], 1e-14);
    }
}

TEST(EncodeDir, JacobianMatchesFiniteDifferences) {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
        Vec3<double> d = random_dir(rng);
        std::array<Vec3<double>, kShBasisSize> jac;
        sh_basis_jacobian(d, kMaxShDegree, jac.data());
        for (int k = 0; k < kShBasisSize; ++k)
            for (int a = 0; a < 3; ++a) {
                const double num = central_difference(
                    [&] {
                        std::array<double, kShBasisSize> b{};
                        sh_basis(d, kMaxShDegree, b.data());
                        return b[k];
                    },
                    d[a], 1e-6);
                EXPECT_TRUE(grad_close(jac[k][a], num, 1e-6, 1e-9));
            }
    }
}

TEST(Decoder, ZeroNetworkIsHalfGray) {
    Decoder<double> net({4 + kDirEncodingDim, 8, 8, 3});
    const std::vector<double> f{0.3, -1.0, 2.0, 0.1};
    EXPECT_EQ(decode(std::span<const double>(f), Vec3<double>(0, 0, 1), net), Vec3<double>(0.5, 0.5, 0.5));
}

TEST(Decoder, OutputBiasOnly) {
    Decoder<double> net({2 + kDirEncodingDim, 8, 3});
    const std::size_t ob = net.bias_offset(net.layer_count() - 1);
    net.params()[ob] = 1.0;
    net.params()[ob + 1] = -2.0;
    net.params()[ob + 2] = 0.0;
    const std::vector<double> f{0.7, -0.4};
    const Vec3<double> rgb = decode(std::span<const double>(f), Vec3<double>(1, 0, 0), net);
    EXPECT_DOUBLE_EQ(rgb[0], sigmoid(1.0));
    EXPECT_DOUBLE_EQ(rgb[1], sigmoid(-2.0));
    EXPECT_DOUBLE_EQ(rgb[2], 0.5);
}

TEST(Decoder, InvalidInputs) {
    EXPECT_THROW(Decoder<double>({4, 8, 2}), ConfigError);
    Decoder<double> net({2 + kDirEncodingDim, 8, 3});
    const std::vector<double> bad{1.0, std::nan("")};
    EXPECT_THROW(decode(std::span<const double>(bad), Vec3<double>(0, 0, 1), net), DomainError);
    const std::vector<double> short_f{1.0};
    EXPECT_THROW(decode(std::span<const double>(short_f), Vec3<double>(0, 0, 1), net), DomainError);
}

TEST(Decoder, StandardShape) {
    Rng rng(4);
    const auto net = Decoder<double>::standard(12, rng);
    EXPECT_EQ(net.dims(), (std::vector<int>{12 + kDirEncodingDim, 64, 64, 3}));
}

TEST(DecodeBackward, ZeroUpstream) {
    Rng rng(5);
    const auto net = Decoder<double>::standard(4, rng, 16);
    const auto f = random_vec(rng, 4);
    const auto g = decode_backward(std::span<const double>(f), Vec3<double>(0, 1, 0), net, Vec3<double>(Vec3<double>::Zero()));
    for (double v : g.net)
        EXPECT_EQ(v, 0.0);
    for (double v : g.feature)
        EXPECT_EQ(v, 0.0);
}

TEST(DecodeBackward, MatchesFiniteDifferences) {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        auto net = Decoder<double>::standard(6, rng, 16);
        for (auto &p : net.params())
            p += rng.normal() * 0.1; // nonzero biases
        auto f = random_vec(rng, 6);
        const Vec3<double> d = random_dir(rng);
        const Vec3<double> up(rng.normal(), rng.normal(), rng.normal());
        const auto g = decode_backward(std::span<const double>(f), d, net, up);
        auto obj = [&] { return up.dot(decode(std::span<const double>(f), d, net)); };
        for (std::size_t k = 0; k < f.size(); ++k)
            EXPECT_TRUE(grad_close(g.feature[k], central_difference(obj, f[k], 1e-6), 1e-5, 1e-9));
        for (int s = 0; s < 60; ++s) {
            const std::size_t k = rng.below(net.param_count());
            EXPECT_TRUE(grad_close(g.net[k], central_difference(obj, net.params()[k], 1e-6), 1e-5, 1e-9));
        }
    }
}

TEST(DecoderBatch, MatchesPerSample) {
    Rng rng(7);
    auto net = Decoder<double>::standard(4, rng, 16);
    const int n = 37;
    Decoder<double>::ColMat in(net.input_dim(), n), up(3, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < net.input_dim(); ++i)
            in(i, j) = rng.normal();
        for (int c = 0; c < 3; ++c)
            up(c, j) = rng.normal();
    }
    Decoder<double>::BatchWorkspace bws;
    const auto out = net.forward_batch(in, bws);
    std::vector<double> gb(net.param_count(), 0.0), gs(net.param_count(), 0.0);
    Decoder<double>::ColMat gin;
    net.backward_batch(bws, up, gb.data(), &gin);
    for (int j = 0; j < n; ++j) {
        Decoder<double>::Workspace ws;
        const std::vector<double> col(in.col(j).data(), in.col(j).data() + in.rows());
        const Vec3<double> y = net.forward(col, ws);
        std::vector<double> gi(in.rows());
        net.backward(ws, Vec3<double>(up.col(j)), gs.data(), gi);
        for (int c = 0; c < 3; ++c)
            EXPECT_NEAR(out(c, j), y[c], 1e-14);
        for (int i = 0; i < in.rows(); ++i)
            EXPECT_NEAR(gin(i, j), gi[i], 1e-12);
    }
    for (std::size_t k = 0; k < gb.size(); ++k)
        EXPECT_NEAR(gb[k], gs[k], 1e-10);
}

TEST(ShEval, ZeroCoefficientsHalfGray) {
    Surfel<double> s;
    s.sh.assign(3 * sh_coeff_count(3), 0.0);
    EXPECT_EQ(sh_eval(s, Vec3<double>(0, 0, 1), 3), Vec3<double>(0.5, 0.5, 0.5));
}

TEST(ShEval, DegreeZeroViewIndependent) {
    Surfel<double> s;
    s.sh = {0.5, -0.3, 1.0};
    Rng rng(8);
    const Vec3<double> a = sh_eval(s, random_dir(rng), 0), b = sh_eval(s, random_dir(rng), 0);
    EXPECT_EQ(a, b);
    EXPECT_NEAR(a[0], 0.5 * 0.28209479177387814 + 0.5, 1e-15);
}

TEST(ShEval, DegreeOneParity) {
    Surfel<double> s;
    s.sh.assign(3 * sh_coeff_count(1), 0.0);
    Rng rng(9);
    for (int k = 3; k < 12; ++k)
        s.sh[k] = rng.uniform(-0.3, 0.3);
    const Vec3<double> d = random_dir(rng);
    const Vec3<double> a = sh_eval(s, d, 1) - Vec3<double>::Constant(0.5);
    const Vec3<double> b = sh_eval(s, Vec3<double>(-d), 1) - Vec3<double>::Constant(0.5);
    EXPECT_LT((a + b).norm(), 1e-14);
}

TEST(ShEval, MissingCoefficients) {
    Surfel<double> s;
    s.sh.assign(3 * sh_coeff_count(1), 0.0);
    EXPECT_THROW(sh_eval(s, Vec3<double>(0, 0, 1), 2), DomainError);
}

TEST(ShEval, BackwardMatchesFiniteDifferences) {
    Rng rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        Surfel<double> s;
        s.sh = random_vec(rng, 3 * sh_coeff_count(3), 0.1);
        Vec3<double> d = random_dir(rng);
        const Vec3<double> up(rng.normal(), rng.normal(), rng.normal());
        std::vector<double> gsh(s.sh.size(), 0.0);
        const Vec3<double> gd = sh_eval_backward(s, d, 3, up, gsh.data());
        auto obj = [&] { return up.dot(sh_eval(s, d, 3)); };
        for (std::size_t k = 0; k < s.sh.size(); ++k)
            EXPECT_TRUE(grad_close(gsh[k], central_difference(obj, s.sh[k], 1e-6), 1e-6, 1e-9));
        for (int a = 0; a < 3; ++a)
            EXPECT_TRUE(grad_close(gd[a], central_difference(obj, d[a], 1e-6), 1e-5, 1e-9));
    }
}
