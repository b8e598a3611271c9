#include "support/oracles.hpp"

#include "mirage/metrics.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mirage;
using namespace mirage::testing;

namespace {

ImageBuffer random_image(int w, int h, std::mt19937_64 &rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    ImageBuffer img(w, h);
    for (double &v : img.data()) v = u(rng);
    return img;
}

// Area-weighted box average onto a floor(n/2) grid, brute force over every
// source pixel.
ImageBuffer oracle_half(const ImageBuffer &img) {
    const int w = img.width() / 2, h = img.height() / 2;
    const double sx = static_cast<double>(img.width()) / w, sy = static_cast<double>(img.height()) / h;
    ImageBuffer out(w, h);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int yy = 0; yy < img.height(); ++yy) {
                    const double oy = std::max(0.0, std::min((y + 1) * sy, yy + 1.0) - std::max(y * sy, 1.0 * yy));
                    if (oy <= 0) continue;
                    for (int xx = 0; xx < img.width(); ++xx) {
                        const double ox =
                            std::max(0.0, std::min((x + 1) * sx, xx + 1.0) - std::max(x * sx, 1.0 * xx));
                        acc += ox * oy * img.at(xx, yy, c);
                    }
                }
                out.at(x, y, c) = acc / (sx * sy);
            }
    return out;
}

} // namespace

TEST(L1, Examples) {
    std::mt19937_64 rng(1);
    const ImageBuffer a = random_image(13, 9, rng, 0.0, 0.5);
    EXPECT_EQ(l1(a, a), 0.0);
    ImageBuffer b = a;
    for (double &v : b.data()) v += 0.5;
    EXPECT_NEAR(l1(b, a), 0.5, 1e-15);
    const ImageBuffer c = random_image(13, 9, rng);
    EXPECT_NEAR(l1(a, c), oracle_l1(a, c), 1e-15);
    EXPECT_THROW(l1(a, ImageBuffer(9, 13)), ShapeError);
}

TEST(L1, SubgradientSign) {
    ImageBuffer a(2, 1), b(2, 1);
    a.data() = {0.5, 0.1, 0.2, 0.5, 0.5, 0.5};
    b.data() = {0.4, 0.1, 0.3, 0.5, 0.6, 0.4};
    ImageBuffer g;
    l1(a, b, &g);
    const double k = 1.0 / 6.0;
    EXPECT_EQ(g.data(), (std::vector<double>{k, 0.0, -k, 0.0, -k, k}));
}

TEST(Psnr, Examples) {
    std::mt19937_64 rng(2);
    const ImageBuffer a = random_image(12, 12, rng, 0.2, 0.8);
    EXPECT_EQ(psnr(a, a), kPsnrCap);
    ImageBuffer b = a;
    for (double &v : b.data()) v += 0.1;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
    const ImageBuffer c = random_image(12, 12, rng);
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m += std::pow(a.data()[i] - c.data()[i], 2);
    m /= a.size();
    EXPECT_NEAR(psnr(a, c), 10.0 * std::log10(1.0 / m), 1e-12);
    EXPECT_THROW(psnr(a, ImageBuffer(3, 3)), ShapeError);
}

TEST(Ssim, IdentityAndWindowCheck) {
    std::mt19937_64 rng(3);
    const ImageBuffer a = random_image(16, 16, rng);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
    EXPECT_NEAR(dssim(a, a), 0.0, 1e-12);
    EXPECT_THROW(ssim(ImageBuffer(10, 20), ImageBuffer(10, 20)), ShapeError);
}

TEST(Ssim, ConstantImagesMatchLuminanceTerm) {
    for (auto [p, q] : {std::pair{0.3, 0.5}, std::pair{0.0, 1.0}, std::pair{0.7, 0.71}}) {
        const double expected = (2 * p * q + kSsimC1) / (p * p + q * q + kSsimC1);
        EXPECT_NEAR(ssim(ImageBuffer(14, 12, p), ImageBuffer(14, 12, q)), expected, 1e-12);
    }
}

TEST(Ssim, MatchesDirectWindowOracle) {
    std::mt19937_64 rng(4);
    for (int k = 0; k < 5; ++k) {
        const ImageBuffer a = random_image(19, 16, rng), b = random_image(19, 16, rng);
        EXPECT_NEAR(ssim(a, b), oracle_ssim(a, b), 1e-12);
    }
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    const double h = 1e-6;
    for (int trial = 0; trial < 3; ++trial) {
        const ImageBuffer a = random_image(16, 16, rng), b = random_image(16, 16, rng);
        ImageBuffer g, gd;
        ssim(a, b, &g);
        dssim(a, b, &gd);
        for (std::size_t i = 0; i < a.size(); ++i) {
            ImageBuffer ap = a, am = a;
            ap.data()[i] += h;
            am.data()[i] -= h;
            const double fd = (oracle_ssim(ap, b) - oracle_ssim(am, b)) / (2 * h);
            const double err = std::abs(fd - g.data()[i]);
            EXPECT_TRUE(err <= 1e-3 * std::abs(fd) || err <= 1e-8) << i << ": " << g.data()[i] << " vs " << fd;
            EXPECT_NEAR(gd.data()[i], -0.5 * g.data()[i], 1e-15);
        }
    }
}

TEST(MsSsim, IdentityIsOne) {
    std::mt19937_64 rng(6);
    const ImageBuffer a = random_image(64, 48, rng);
    EXPECT_NEAR(ms_ssim(a, a), 1.0, 1e-12);
}

TEST(MsSsim, ScaleCount) {
    EXPECT_EQ(ms_ssim_scales(176, 176), 5);
    EXPECT_EQ(ms_ssim_scales(128, 128), 4);
    EXPECT_EQ(ms_ssim_scales(32, 64), 2);
    EXPECT_EQ(ms_ssim_scales(21, 200), 1);
    EXPECT_EQ(ms_ssim_scales(10, 200), 0);
    double sum = 0.0;
    for (double w : kMsSsimWeights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-4);
}

TEST(MsSsim, SingleScaleReducesToSsim) {
    std::mt19937_64 rng(7);
    const ImageBuffer a = random_image(16, 20, rng, 0.2, 0.8);
    ImageBuffer b = a;
    for (double &v : b.data()) v = std::clamp(v + 0.05 * std::sin(41.0 * v), 0.0, 1.0);
    ASSERT_EQ(ms_ssim_scales(16, 20), 1);
    EXPECT_NEAR(ms_ssim(a, b), ssim(a, b), 1e-12);
}

TEST(MsSsim, InvertedNoiseIsLow) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.5, 0.15);
    ImageBuffer a(64, 64);
    for (double &v : a.data()) v = std::clamp(n(rng), 0.0, 1.0);
    ImageBuffer inv = a;
    for (double &v : inv.data()) v = 1.0 - v;
    EXPECT_LT(ms_ssim(a, inv), 0.5);
}

TEST(MsSsim, MatchesIndependentPyramid) {
    std::mt19937_64 rng(9);
    const ImageBuffer a = random_image(45, 37, rng);
    ImageBuffer b = a;
    for (double &v : b.data()) v = std::clamp(v + 0.1 * (v - 0.5), 0.0, 1.0);

    auto channel_ssim = [](const ImageBuffer &x, const ImageBuffer &y, int c) {
        ImageBuffer xc(x.width(), x.height()), yc(y.width(), y.height());
        for (int yy = 0; yy < x.height(); ++yy)
            for (int xx = 0; xx < x.width(); ++xx)
                for (int k = 0; k < 3; ++k) {
                    xc.at(xx, yy, k) = x.at(xx, yy, c);
                    yc.at(xx, yy, k) = y.at(xx, yy, c);
                }
        return oracle_ssim(xc, yc);
    };
    // Scales for 45x37: 37 -> 18 -> 9, so two scales.
    ASSERT_EQ(ms_ssim_scales(45, 37), 2);
    const double w0 = kMsSsimWeights[0] / (kMsSsimWeights[0] + kMsSsimWeights[1]);
    const double w1 = 1.0 - w0;
    double total = 0.0;
    const ImageBuffer a1 = oracle_half(a), b1 = oracle_half(b);
    for (int c = 0; c < 3; ++c) {
        // Contrast-structure term at the finest scale.
        double w[11][11], ws = 0.0;
        for (int i = 0; i < 11; ++i)
            for (int k = 0; k < 11; ++k) ws += (w[i][k] = std::exp(-((i - 5) * (i - 5) + (k - 5) * (k - 5)) / 4.5));
        double cs = 0.0;
        int count = 0;
        for (int y = 0; y + 11 <= a.height(); ++y)
            for (int x = 0; x + 11 <= a.width(); ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < 11; ++i)
                    for (int k = 0; k < 11; ++k) {
                        const double t = w[i][k] / ws, va = a.at(x + k, y + i, c), vb = b.at(x + k, y + i, c);
                        ma += t * va;
                        mb += t * vb;
                        saa += t * va * va;
                        sbb += t * vb * vb;
                        sab += t * va * vb;
                    }
                cs += (2 * (sab - ma * mb) + kSsimC2) / ((saa - ma * ma) + (sbb - mb * mb) + kSsimC2);
                ++count;
            }
        cs /= count;
        total += std::pow(std::max(0.0, cs), w0) * std::pow(std::max(0.0, channel_ssim(a1, b1, c)), w1);
    }
    EXPECT_NEAR(ms_ssim(a, b), total / 3.0, 1e-10);
}

TEST(Metrics, Symmetry) {
    std::mt19937_64 rng(10);
    for (int k = 0; k < 3; ++k) {
        const ImageBuffer a = random_image(40, 33, rng), b = random_image(40, 33, rng);
        EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
        EXPECT_EQ(psnr(a, b), psnr(b, a));
        EXPECT_EQ(l1(a, b), l1(b, a));
        EXPECT_NEAR(ms_ssim(a, b), ms_ssim(b, a), 1e-12);
    }
}

TEST(Metrics, HflipInvariance) {
    std::mt19937_64 rng(11);
    for (auto [w, h] : {std::pair{40, 33}, std::pair{53, 47}, std::pair{128, 128}}) {
        const ImageBuffer a = random_image(w, h, rng);
        ImageBuffer b = a;
        for (double &v : b.data()) v = std::clamp(v * 0.8 + 0.1, 0.0, 1.0);
        const ImageBuffer fa = hflip(a), fb = hflip(b);
        EXPECT_NEAR(ssim(fa, fb), ssim(a, b), 1e-9);
        EXPECT_NEAR(psnr(fa, fb), psnr(a, b), 1e-9);
        EXPECT_NEAR(l1(fa, fb), l1(a, b), 1e-9);
        EXPECT_NEAR(ms_ssim(fa, fb), ms_ssim(a, b), 1e-9);
    }
}

TEST(Metrics, ReportJson) {
    MetricReport r{30.5, 0.97, 0.01};
    const auto j = to_json(r);
    EXPECT_EQ(j.at("psnr").get<double>(), 30.5);
    EXPECT_EQ(j.at("ms_ssim").get<double>(), 0.97);
    EXPECT_EQ(j.at("l1").get<double>(), 0.01);
}
