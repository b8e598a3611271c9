#include "support/oracles.hpp"

#include "mirage/io.hpp"
#include "mirage/trainer.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mirage;
using namespace mirage::testing;

namespace {

void expect_mode_invariants(const Scene &s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
        const FlatGaussian &g = s.gaussians[i];
        ASSERT_EQ(g.scales[0], kEpsilon);
        EXPECT_NEAR(g.quat.norm(), 1.0, 1e-6);
        EXPECT_GT(g.scales[1], 0.0);
        EXPECT_GT(g.scales[2], 0.0);
        if (s.mode == Mode::Amorphous) continue;
        const Vec3 normal = g.rotation().col(0);
        EXPECT_LE((normal.cwiseAbs() - Vec3::UnitY()).norm(), 1e-6);
        if (s.mode == Mode::TwoD) EXPECT_EQ(g.mean.y(), 0.0);
        if (s.mode == Mode::Graphite) EXPECT_EQ(g.mean.y(), s.gamma[i]);
    }
}

TrainConfig small_config(Mode mode, int n, int iterations) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.n_init = n;
    cfg.iterations = iterations;
    cfg.eval_interval = 0;
    return cfg;
}

TrainConfig zero_rates(TrainConfig cfg) {
    cfg.lr = LearningRates{0, 0, 0, 0, 0, 0};
    return cfg;
}

} // namespace

TEST(PlaneExtents, Examples) {
    auto e = plane_extents(1.0, kPi / 2, 1.0);
    EXPECT_NEAR(e.dev_x, 1.0, 1e-15);
    EXPECT_NEAR(e.dev_z, 1.0, 1e-15);
    e = plane_extents(2.0, kPi / 2, 1.5);
    EXPECT_NEAR(e.dev_x, 3.0, 1e-15);
    EXPECT_NEAR(e.dev_z, 2.0, 1e-15);
    EXPECT_NEAR(plane_extents(1.0, kPi / 3, 1.0).dev_z, 0.5773502691896258, 1e-12);
    EXPECT_THROW(plane_extents(0.0, 1.0, 1.0), ValidationError);
    EXPECT_THROW(plane_extents(1.0, kPi, 1.0), ValidationError);
    EXPECT_THROW(plane_extents(1.0, 0.0, 1.0), ValidationError);
}

TEST(PlaneExtents, BoundaryOfExtentsProjectsToImageEdge) {
    CameraRig rig = small_rig(48, 32);
    const PlaneExtents e = plane_extents(rig);
    const Camera cam = make_camera(rig, View::Primary);
    const Vec3 t = cam.to_camera(Vec3(e.dev_x, 0.0, -e.dev_z));
    EXPECT_NEAR(cam.fx * t.x() / t.z() + cam.cx, 48.0, 1e-9);
    EXPECT_NEAR(cam.fy * t.y() / t.z() + cam.cy, 32.0, 1e-9);
}

TEST(InitScene, SingleGaussian) {
    const ImageBuffer target = smoke_image(0, 32, 32);
    for (Mode m : {Mode::Amorphous, Mode::TwoD, Mode::Graphite}) {
        TrainConfig cfg = small_config(m, 1, 0);
        const Scene s = init_scene(cfg, target);
        ASSERT_EQ(s.size(), 1u);
        const PlaneExtents e = plane_extents(*s.rig);
        EXPECT_EQ(s.gaussians[0].mean.y(), 0.0);
        EXPECT_LE(std::abs(s.gaussians[0].mean.x()), e.dev_x);
        EXPECT_LE(std::abs(s.gaussians[0].mean.z()), e.dev_z);
        EXPECT_NEAR(s.gaussians[0].opacity(), 0.1, 1e-12);
    }
}

TEST(InitScene, ModeInvariantsAndColors) {
    const ImageBuffer target = smoke_image(1, 40, 30);
    for (Mode m : {Mode::Amorphous, Mode::TwoD, Mode::Graphite}) {
        const Scene s = init_scene(small_config(m, 300, 0), target);
        expect_mode_invariants(s);
        EXPECT_EQ(s.phi.size(), uses_phi(m) ? 300u : 0u);
        EXPECT_EQ(s.gamma.size(), m == Mode::Graphite ? 300u : 0u);
        for (double g : s.gamma) EXPECT_EQ(g, 0.0);
        for (double p : s.phi) {
            EXPECT_GE(p, 0.0);
            EXPECT_LT(p, 2 * kPi);
        }
        const Camera cam = make_camera(*s.rig, View::Primary);
        for (const FlatGaussian &g : s.gaussians) {
            const Vec3 t = cam.to_camera(g.mean);
            const int px = static_cast<int>(cam.fx * t.x() / t.z() + cam.cx);
            const int py = static_cast<int>(cam.fy * t.y() / t.z() + cam.cy);
            EXPECT_EQ(g.color, target.pixel(std::min(px, 39), std::min(py, 29)));
            EXPECT_EQ(g.scales[1], g.scales[2]);
        }
    }
}

TEST(InitScene, ScaleIsMeanNearestNeighborSpacing) {
    const ImageBuffer target(32, 32, 0.5);
    const Scene s = init_scene(small_config(Mode::Amorphous, 200, 0), target);
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        double best = 1e9;
        for (std::size_t j = 0; j < s.size(); ++j)
            if (i != j) best = std::min(best, (s.gaussians[i].mean - s.gaussians[j].mean).norm());
        total += best;
    }
    EXPECT_NEAR(s.gaussians[0].scales[1], total / s.size(), 1e-12);
}

TEST(InitScene, DeterministicUnderSeed) {
    const ImageBuffer target = smoke_image(2, 64, 64);
    TrainConfig cfg = small_config(Mode::Graphite, 10000, 0);
    cfg.seed = 17;
    EXPECT_EQ(scene_to_string(init_scene(cfg, target)), scene_to_string(init_scene(cfg, target)));
    TrainConfig other = cfg;
    other.seed = 18;
    EXPECT_NE(scene_to_string(init_scene(cfg, target)), scene_to_string(init_scene(other, target)));
}

TEST(Loss, Examples) {
    std::mt19937_64 rng(1);
    ImageBuffer a(16, 16), b(16, 16);
    std::uniform_real_distribution<double> u(0, 1);
    for (double &v : a.data()) v = u(rng);
    for (double &v : b.data()) v = u(rng);
    EXPECT_NEAR(loss(a, a, 0.2).value, 0.0, 1e-12);
    EXPECT_EQ(loss(a, b, 0.0).value, l1(a, b));
    EXPECT_NEAR(loss(a, b, 0.2).value, 0.8 * oracle_l1(a, b) + 0.2 * 0.5 * (1.0 - oracle_ssim(a, b)), 1e-12);
    EXPECT_THROW(loss(a, ImageBuffer(15, 16), 0.2), ShapeError);
}

TEST(MirrorObjective, TwoDTermsAgree) {
    std::mt19937_64 rng(2);
    CameraRig rig = small_rig(32, 24);
    for (int k = 0; k < 3; ++k) {
        const Scene s = random_scene(Mode::TwoD, 20, rig, rng);
        ImageBuffer target(32, 24);
        std::uniform_real_distribution<double> u(0, 1);
        for (double &v : target.data()) v = u(rng);
        const ObjectiveResult r = mirror_objective(s, rig, target, 0.2);
        EXPECT_NEAR(r.primary, r.mirror, 1e-6);
        EXPECT_NEAR(r.total, r.primary + r.mirror, 1e-15);
    }
}

TEST(MirrorObjective, DisabledReducesToSingleView) {
    std::mt19937_64 rng(3);
    CameraRig rig = small_rig();
    rig.mirror_enabled = false;
    const Scene s = random_scene(Mode::Amorphous, 10, rig, rng);
    const ImageBuffer target = smoke_image(0, 32, 32);
    const ObjectiveResult r = mirror_objective(s, rig, target, 0.2);
    const ImageBuffer img = render(s, make_camera(rig, View::Primary));
    EXPECT_EQ(r.total, loss(img, target, 0.2).value);
    EXPECT_EQ(r.mirror, 0.0);
}

TEST(MirrorObjective, GradientsAreSumOfViews) {
    std::mt19937_64 rng(4);
    const CameraRig rig = small_rig();
    const Scene s = random_scene(Mode::Amorphous, 6, rig, rng);
    const ImageBuffer target = smoke_image(1, 32, 32);
    const ObjectiveResult r = mirror_objective(s, rig, target, 0.2);
    const ObjectiveResult p = single_view_objective(s, make_camera(rig, View::Primary), target, 0.2);
    const ObjectiveResult m = single_view_objective(s, make_camera(rig, View::Mirror), hflip(target), 0.2);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_LE((r.grads.g[i].mean - p.grads.g[i].mean - m.grads.g[i].mean).norm(), 1e-15);
        EXPECT_LE((r.grads.g[i].color - p.grads.g[i].color - m.grads.g[i].color).norm(), 1e-15);
    }
}

TEST(MirrorObjective, EmptySceneBlackTarget) {
    Scene s;
    const ObjectiveResult r = mirror_objective(s, small_rig(), ImageBuffer(32, 32), 0.2);
    EXPECT_EQ(r.primary, 0.0);
    EXPECT_EQ(r.mirror, 0.0);
}

TEST(Constrain, IdempotentAndProjects) {
    std::mt19937_64 rng(5);
    for (Mode m : {Mode::Amorphous, Mode::TwoD, Mode::Graphite}) {
        Scene s = random_scene(m, 30, small_rig(), rng);
        constrain(s);
        const std::string before = scene_to_string(s);
        Scene again = s;
        constrain(again);
        for (std::size_t i = 0; i < s.size(); ++i) {
            EXPECT_LE((again.gaussians[i].mean - s.gaussians[i].mean).norm(), 1e-9);
            EXPECT_LE((again.gaussians[i].quat - s.gaussians[i].quat).norm(), 1e-9);
        }
        (void)before;
    }
    Scene s = random_scene(Mode::TwoD, 5, small_rig(), rng);
    s.gaussians[2].mean.y() = 0.3;
    constrain(s);
    EXPECT_EQ(s.gaussians[2].mean.y(), 0.0);

    Scene g = random_scene(Mode::Graphite, 5, small_rig(), rng);
    g.gamma[1] += 0.125;
    constrain(g);
    EXPECT_EQ(g.gaussians[1].mean.y(), g.gamma[1]);
    expect_mode_invariants(g);

    Scene a = random_scene(Mode::Amorphous, 3, small_rig(), rng);
    a.gaussians[0].quat *= 3.0;
    a.gaussians[0].scales[0] = 0.5;
    constrain(a);
    EXPECT_NEAR(a.gaussians[0].quat.norm(), 1.0, 1e-15);
    EXPECT_EQ(a.gaussians[0].scales[0], kEpsilon);
}

TEST(TrainStep, ZeroLearningRatesLeaveSceneUnchanged) {
    const ImageBuffer target = smoke_image(0, 32, 32);
    for (Mode m : {Mode::Amorphous, Mode::TwoD, Mode::Graphite}) {
        TrainConfig cfg = zero_rates(small_config(m, 50, 10));
        Scene s = init_scene(cfg, target);
        const std::string before = scene_to_string(s);
        TrainerState st = make_trainer_state(s, *s.rig, cfg);
        for (int k = 0; k < 3; ++k) train_step(s, *s.rig, target, cfg, st);
        EXPECT_EQ(scene_to_string(s), before);
    }
}

TEST(TrainStep, ColorConvergesOnConstantTarget) {
    const Vec3 target_color(0.8, 0.3, 0.55);
    const ImageBuffer target = [&] {
        ImageBuffer t(32, 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) t.set_pixel(x, y, target_color);
        return t;
    }();
    TrainConfig cfg = zero_rates(small_config(Mode::Amorphous, 1, 500));
    cfg.lr.color = 2.5e-3;
    cfg.background = target_color;
    Scene s = init_scene(cfg, target);
    s.gaussians[0].color = Vec3(0.1, 0.9, 0.2);
    s.gaussians[0].opacity_logit = logit(0.8);
    TrainerState st = make_trainer_state(s, *s.rig, cfg);
    for (int k = 0; k < 500; ++k) train_step(s, *s.rig, target, cfg, st);
    EXPECT_LE((s.gaussians[0].color - target_color).cwiseAbs().maxCoeff(), 1.0 / 255);
}

TEST(TrainStep, LossTrendsDownOnSmokeImage) {
    const ImageBuffer target = smoke_image(0, 64, 64);
    TrainConfig cfg = small_config(Mode::Amorphous, 500, 100);
    cfg.densify = false;
    Scene s = init_scene(cfg, target);
    TrainerState st = make_trainer_state(s, *s.rig, cfg);
    std::vector<double> losses;
    for (int k = 0; k < 100; ++k) losses.push_back(train_step(s, *s.rig, target, cfg, st).loss);
    int increases = 0;
    for (std::size_t k = 1; k < losses.size(); ++k)
        if (losses[k] > losses[k - 1]) ++increases;
    EXPECT_LE(increases, 5);
    EXPECT_LT(losses.back(), losses.front());
}

TEST(TrainStep, ModeInvariantsHoldAfterEveryStep) {
    const ImageBuffer target = smoke_image(2, 32, 32);
    for (Mode m : {Mode::Amorphous, Mode::TwoD, Mode::Graphite}) {
        TrainConfig cfg = small_config(m, 80, 20);
        cfg.lr.gamma = 1e-2;
        Scene s = init_scene(cfg, target);
        TrainerState st = make_trainer_state(s, *s.rig, cfg);
        for (int k = 0; k < 20; ++k) {
            train_step(s, *s.rig, target, cfg, st);
            expect_mode_invariants(s);
        }
        if (m == Mode::Graphite) {
            double spread = 0.0;
            for (double g : s.gamma) spread = std::max(spread, std::abs(g));
            EXPECT_GT(spread, 0.0);
        }
    }
}

TEST(TrainStep, NonFiniteLossNamesParameter) {
    const ImageBuffer target = smoke_image(0, 32, 32);
    TrainConfig cfg = small_config(Mode::Amorphous, 5, 1);
    Scene s = init_scene(cfg, target);
    s.gaussians[3].color[1] = std::numeric_limits<double>::quiet_NaN();
    TrainerState st = make_trainer_state(s, *s.rig, cfg);
    try {
        train_step(s, *s.rig, target, cfg, st);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError &e) {
        EXPECT_NE(std::string(e.what()).find("gaussian 3 color"), std::string::npos) << e.what();
    }
}

TEST(DensifyAndPrune, NoHotGradientsKeepsScene) {
    std::mt19937_64 rng(6);
    const CameraRig rig = small_rig();
    Scene s = random_scene(Mode::TwoD, 10, rig, rng);
    TrainConfig cfg;
    TrainerState st = make_trainer_state(s, rig, cfg);
    const std::string before = scene_to_string(s);
    densify_and_prune(s, st, cfg);
    EXPECT_EQ(scene_to_string(s), before);
}

TEST(DensifyAndPrune, TransparentGaussianRemoved) {
    std::mt19937_64 rng(7);
    const CameraRig rig = small_rig();
    Scene s = random_scene(Mode::Graphite, 6, rig, rng);
    s.gaussians[2].opacity_logit = -40.0;
    const double gamma3 = s.gamma[3];
    TrainConfig cfg;
    TrainerState st = make_trainer_state(s, rig, cfg);
    st.adam.m[3][11] = 0.5;
    densify_and_prune(s, st, cfg);
    ASSERT_EQ(s.size(), 5u);
    EXPECT_EQ(s.gamma.size(), 5u);
    EXPECT_EQ(s.gamma[2], gamma3);
    EXPECT_EQ(st.adam.m[2][11], 0.5);

    cfg.prune = false;
    s.gaussians[0].opacity_logit = -40.0;
    densify_and_prune(s, st, cfg);
    EXPECT_EQ(s.size(), 5u);
}

TEST(DensifyAndPrune, LargeHotGaussianSplits) {
    Scene s;
    s.mode = Mode::TwoD;
    FlatGaussian g;
    g.quat = quaternion_from_phi(0.3);
    g.scales = Vec3(kEpsilon, 0.4, 0.3);
    g.opacity_logit = logit(0.5);
    s.gaussians.push_back(g);
    s.sync_mode_params();
    s.phi[0] = 0.3;
    const CameraRig rig = small_rig();
    TrainConfig cfg;
    TrainerState st = make_trainer_state(s, rig, cfg);
    st.densify.grad_accum[0] = 1.0;
    st.densify.seen[0] = 1;
    densify_and_prune(s, st, cfg);
    ASSERT_EQ(s.size(), 2u);
    const double before = 0.4 * 0.3;
    for (const FlatGaussian &c : s.gaussians) {
        EXPECT_NEAR(c.scales[1], 0.4 / 1.6, 1e-15);
        EXPECT_NEAR(c.scales[2], 0.3 / 1.6, 1e-15);
        EXPECT_LT(c.scales[1] * c.scales[2], before);
        EXPECT_EQ(c.mean.y(), 0.0);
    }
    EXPECT_EQ(s.phi, (std::vector<double>{0.3, 0.3}));
    expect_mode_invariants(s);
    EXPECT_EQ(st.adam.m.size(), 2u);
}

TEST(DensifyAndPrune, SmallHotGaussianClones) {
    Scene s;
    FlatGaussian g;
    g.scales = Vec3(kEpsilon, 1e-3, 1e-3);
    g.opacity_logit = logit(0.5);
    s.gaussians = {g, g};
    const CameraRig rig = small_rig();
    TrainConfig cfg;
    TrainerState st = make_trainer_state(s, rig, cfg);
    st.densify.grad_accum[1] = 1.0;
    st.densify.seen[1] = 1;
    densify_and_prune(s, st, cfg);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_EQ(s.gaussians[2].scales, g.scales);
    EXPECT_EQ(st.densify.seen, (std::vector<int>{0, 0, 0}));
}

TEST(DensifyAndPrune, RespectsBudget) {
    Scene s;
    FlatGaussian g;
    g.scales = Vec3(kEpsilon, 1e-3, 1e-3);
    g.opacity_logit = logit(0.5);
    s.gaussians.assign(4, g);
    const CameraRig rig = small_rig();
    TrainConfig cfg;
    cfg.max_gaussians = 6;
    TrainerState st = make_trainer_state(s, rig, cfg);
    for (int i = 0; i < 4; ++i) {
        st.densify.grad_accum[i] = 1.0;
        st.densify.seen[i] = 1;
    }
    densify_and_prune(s, st, cfg);
    EXPECT_EQ(s.size(), 6u);
}

TEST(Train, ConstantImageReaches45Db) {
    const ImageBuffer target(64, 64, 0.0);
    ImageBuffer t = target;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) t.set_pixel(x, y, Vec3(0.2, 0.6, 0.4));
    TrainConfig cfg = small_config(Mode::Amorphous, 500, 2000);
    const TrainResult r = train(t, cfg);
    EXPECT_GE(r.final_report.psnr, 45.0);
    expect_mode_invariants(r.scene);
}

TEST(Train, DeterministicLossCurves) {
    const ImageBuffer target = smoke_image(1, 32, 32);
    TrainConfig cfg = small_config(Mode::Graphite, 100, 250);
    cfg.seed = 5;
    const TrainResult a = train(target, cfg), b = train(target, cfg);
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(scene_to_string(a.scene), scene_to_string(b.scene));
}

TEST(Train, HistoryLogsBothTermsWithMirror) {
    const ImageBuffer target = smoke_image(0, 32, 32);
    TrainConfig cfg = small_config(Mode::Amorphous, 50, 20);
    cfg.eval_interval = 10;
    const TrainResult r = train(target, cfg);
    ASSERT_EQ(r.history.size(), 2u);
    EXPECT_TRUE(to_json(r.history[0], true).contains("loss_mirror"));
    EXPECT_FALSE(to_json(r.history[0], false).contains("loss_mirror"));
    EXPECT_GT(r.history[0].loss_mirror, 0.0);
}

TEST(Config, JsonOverridesAndValidation) {
    TrainConfig cfg;
    apply_config_json(cfg, nlohmann::json::parse(R"({"mode": "graphite", "n_init": 12, "lambda": 0.5,
        "mirror": false, "lr": {"color": 0.01}, "background": [1, 1, 1]})"));
    EXPECT_EQ(cfg.mode, Mode::Graphite);
    EXPECT_EQ(cfg.n_init, 12);
    EXPECT_EQ(cfg.lambda, 0.5);
    EXPECT_FALSE(cfg.mirror_enabled);
    EXPECT_EQ(cfg.lr.color, 0.01);
    EXPECT_EQ(cfg.background, Vec3::Ones());
    EXPECT_THROW(apply_config_json(cfg, nlohmann::json::parse(R"({"lambda": 2})")), ValidationError);
    EXPECT_THROW(apply_config_json(cfg, nlohmann::json::parse(R"({"n_init": "many"})")), ParseError);
}
