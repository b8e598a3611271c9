#include "support/oracles.hpp"

#include "mirage/rasterizer.hpp"
#include "mirage/trainer.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mirage;
using namespace mirage::testing;

namespace {

FlatGaussian disc_at_origin(double radius, double opacity, const Vec3 &color) {
    FlatGaussian g;
    g.quat = quaternion_from_phi(0.0);
    g.scales = Vec3(kEpsilon, radius, radius);
    g.opacity_logit = logit(opacity);
    g.color = color;
    return g;
}

} // namespace

TEST(Project, OnAxisPointLandsAtImageCenter) {
    const CameraRig rig = small_rig(64, 48);
    const auto p = project(disc_at_origin(0.1, 0.5, Vec3::Ones()), make_camera(rig, View::Primary));
    ASSERT_TRUE(p.has_value());
    EXPECT_NEAR(p->mean2d.x(), 32.0, 1e-12);
    EXPECT_NEAR(p->mean2d.y(), 24.0, 1e-12);
    EXPECT_NEAR(p->depth, rig.cam_dist, 1e-12);
}

TEST(Project, BehindCameraIsCulled) {
    const CameraRig rig = small_rig();
    FlatGaussian g = disc_at_origin(0.1, 0.5, Vec3::Ones());
    g.mean = Vec3(0.0, -rig.cam_dist - 0.5, 0.0);
    EXPECT_FALSE(project(g, make_camera(rig, View::Primary)).has_value());
}

TEST(Project, OffscreenIsCulled) {
    const CameraRig rig = small_rig();
    FlatGaussian g = disc_at_origin(0.01, 0.5, Vec3::Ones());
    g.mean = Vec3(50.0, 0.0, 0.0);
    EXPECT_FALSE(project(g, make_camera(rig, View::Primary)).has_value());
}

TEST(Project, DiscRadiusFollowsSimilarTriangles) {
    CameraRig rig = small_rig(256, 256);
    const double r = 0.2;
    const auto p = project(disc_at_origin(r, 0.5, Vec3::Ones()), make_camera(rig, View::Primary));
    ASSERT_TRUE(p.has_value());
    const double expected = r * (rig.height / 2.0) / (rig.cam_dist * std::tan(rig.fov_vert / 2.0));
    // The 0.3 px^2 floor is part of cov2d; compare the geometric part.
    EXPECT_NEAR(std::sqrt(p->cov2d(0, 0) - kCov2dFloor), expected, 0.01 * expected);
    EXPECT_NEAR(std::sqrt(p->cov2d(1, 1) - kCov2dFloor), expected, 0.01 * expected);
}

TEST(DepthSort, IdentityReverseAndStable) {
    std::vector<ProjectedGaussian> ps(4);
    for (int i = 0; i < 4; ++i) ps[i].depth = i;
    EXPECT_EQ(depth_sort(ps), (std::vector<std::size_t>{0, 1, 2, 3}));
    for (int i = 0; i < 4; ++i) ps[i].depth = 3 - i;
    EXPECT_EQ(depth_sort(ps), (std::vector<std::size_t>{3, 2, 1, 0}));
    for (auto &p : ps) p.depth = 1.0;
    EXPECT_EQ(depth_sort(ps), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Render, EmptySceneIsBackground) {
    Scene s;
    s.background = Vec3(0.2, 0.4, 0.6);
    const ImageBuffer img = render(s, make_camera(small_rig(), View::Primary));
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) EXPECT_EQ(img.pixel(x, y), s.background);
}

TEST(Render, OpaqueCenterMatchesColor) {
    Scene s;
    s.gaussians.push_back(disc_at_origin(0.5, 0.999, Vec3(1, 0, 0)));
    const ImageBuffer img = render(s, make_camera(small_rig(), View::Primary));
    const Vec3 c = img.pixel(16, 16);
    EXPECT_NEAR(c[0], kAlphaMax, 1e-12);
    EXPECT_NEAR(c[1], 0.0, 1e-12);
}

TEST(Render, FrontGaussianOccludes) {
    Scene s;
    FlatGaussian front = disc_at_origin(0.5, 0.999, Vec3(0, 1, 0));
    front.mean.y() = -0.3;
    FlatGaussian back = disc_at_origin(0.5, 0.999, Vec3(0, 0, 1));
    back.mean.y() = 0.3;
    s.gaussians = {back, front};
    const ImageBuffer img = render(s, make_camera(small_rig(), View::Primary));
    const Vec3 c = img.pixel(16, 16);
    EXPECT_NEAR(c[1], kAlphaMax, 1e-12);
    EXPECT_NEAR(c[2], (1.0 - kAlphaMax) * kAlphaMax, 1e-3);
}

TEST(Render, DeterministicAndBounded) {
    std::mt19937_64 rng(3);
    const CameraRig rig = small_rig();
    Scene s = random_scene(Mode::Amorphous, 40, rig, rng);
    s.background = Vec3::Zero();
    const Camera cam = make_camera(rig, View::Primary);
    const ImageBuffer a = render(s, cam), b = render(s, cam);
    EXPECT_EQ(a, b);
    for (double v : a.data()) EXPECT_LE(v, 1.0);
}

TEST(Render, TwoDMirrorIsHorizontalFlip) {
    std::mt19937_64 rng(5);
    const CameraRig rig = small_rig(40, 28);
    for (int trial = 0; trial < 5; ++trial) {
        const Scene s = random_scene(Mode::TwoD, 30, rig, rng);
        const ImageBuffer p = render(s, make_camera(rig, View::Primary));
        const ImageBuffer m = render(s, make_camera(rig, View::Mirror));
        EXPECT_LE(max_abs_diff(m, hflip(p)), 1.0 / 255);
    }
}

TEST(Backward, ZeroLossGradGivesZeroGradients) {
    std::mt19937_64 rng(7);
    const CameraRig rig = small_rig();
    const Scene s = random_scene(Mode::Amorphous, 8, rig, rng);
    const Camera cam = make_camera(rig, View::Primary);
    const ParamGrads g = render_backward(s, cam, ImageBuffer(32, 32), ImageBuffer(32, 32));
    for (const auto &gg : g.g) {
        EXPECT_EQ(gg.mean.norm(), 0.0);
        EXPECT_EQ(gg.quat.norm(), 0.0);
        EXPECT_EQ(gg.scales.norm(), 0.0);
        EXPECT_EQ(gg.opacity_logit, 0.0);
        EXPECT_EQ(gg.color.norm(), 0.0);
    }
}

TEST(Backward, ResolutionMismatchThrows) {
    Scene s;
    const Camera cam = make_camera(small_rig(), View::Primary);
    EXPECT_THROW(render_backward(s, cam, ImageBuffer(32, 32), ImageBuffer(16, 32)), ShapeError);
}

TEST(Backward, L1AtItsMinimumHasZeroGradient) {
    Scene s;
    s.gaussians.push_back(disc_at_origin(0.3, 0.6, Vec3(0.3, 0.6, 0.9)));
    const Camera cam = make_camera(small_rig(), View::Primary);
    const ImageBuffer img = render(s, cam);
    ImageBuffer g;
    l1(img, img, &g);
    const ParamGrads pg = render_backward(s, cam, img, g);
    EXPECT_LT(pg.g[0].color.norm() + pg.g[0].mean.norm() + std::abs(pg.g[0].opacity_logit), 1e-9);
}

TEST(Backward, CulledGaussianHasZeroGradient) {
    std::mt19937_64 rng(11);
    const CameraRig rig = small_rig();
    Scene s = random_scene(Mode::Amorphous, 4, rig, rng);
    s.gaussians[2].mean = Vec3(0, -10, 0);
    const Camera cam = make_camera(rig, View::Primary);
    ImageBuffer ones(32, 32, 1.0);
    const ParamGrads pg = render_backward(s, cam, ones, ones);
    EXPECT_EQ(pg.g[2].mean.norm() + pg.g[2].color.norm() + std::abs(pg.g[2].opacity_logit), 0.0);
}

class GradientCheck : public ::testing::TestWithParam<Mode> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
    std::mt19937_64 rng(100 + static_cast<int>(GetParam()));
    const CameraRig rig = small_rig();
    for (int trial = 0; trial < 4; ++trial) {
        const Scene s = random_scene(GetParam(), 8, rig, rng);
        for (View view : {View::Primary, View::Mirror}) {
            const Camera cam = make_camera(rig, view);
            RenderState st;
            RenderTrace trace;
            const ImageBuffer img = render(s, cam, s.background, &st, &trace);
            const ImageBuffer target = offset_target(img, rng);
            const LossValue lv = loss(img, target, 0.2);
            const ParamGrads analytic = render_backward(s, cam, st, lv.grad);
            const auto result = check_gradients(s, analytic, [&](const Scene &p) {
                return oracle_loss(oracle_render(p, cam, trace.contributors), target, 0.2);
            });
            EXPECT_EQ(result.failed, 0u) << "worst: " << result.worst_name << " rel " << result.worst_rel;
            EXPECT_GT(result.checked, 0u);
        }
    }
}

INSTANTIATE_TEST_SUITE_P(AllModes, GradientCheck,
                         ::testing::Values(Mode::Amorphous, Mode::TwoD, Mode::Graphite));
