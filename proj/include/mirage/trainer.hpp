#pragma once

// Fitting a scene to an image: initialization on the XZ plane, the
// L1 + D-SSIM objective (optionally summed with the mirror view against
// the flipped image), per-mode constraint projection, adaptive-moment
// updates and densification/pruning.

#include "mirage/camera.hpp"
#include "mirage/core.hpp"
#include "mirage/games.hpp"
#include "mirage/metrics.hpp"
#include "mirage/rasterizer.hpp"

#include <json.hpp>

#include <array>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace mirage {

struct LearningRates {
    double mean = 1.6e-4; // multiplied by the scene extent
    double scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double color = 2.5e-3;
    double gamma = 1.6e-4;
};

struct TrainConfig {
    Mode mode = Mode::Amorphous;
    int n_init = 5000;
    int iterations = 2000;
    double lambda = 0.2;
    LearningRates lr;
    // Exponential decay of the positional rates (mean, gamma) down to
    // lr * position_lr_final_factor at the last iteration.
    double position_lr_final_factor = 0.01;
    double cam_dist = 2.4;
    double fov_vert = kPi / 3.0;
    bool mirror_enabled = true;
    Vec3 background = Vec3::Zero();

    bool densify = true;
    int densify_interval = 100;
    double densify_until_fraction = 0.6;
    double densify_grad_threshold = 2e-4; // multiplied by the scene extent
    double percent_dense = 0.01;
    int max_gaussians = 0; // 0: unlimited
    bool prune = true;
    double prune_opacity = 0.005;

    double init_opacity = 0.1;
    int eval_interval = 100;
    bool eval_ms_ssim = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("config: lambda must lie in [0, 1]");
        if (n_init < 1) throw ValidationError("config: n_init must be >= 1");
        if (iterations < 0) throw ValidationError("config: iterations must be >= 0");
        const double rates[] = {lr.mean, lr.scale, lr.rotation, lr.opacity, lr.color, lr.gamma};
        for (double r : rates)
            if (!(r >= 0.0)) throw ValidationError("config: learning rates must be non-negative");
        if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw ValidationError("config: init_opacity must lie in (0, 1)");
    }
};

/// Rig for a target image under a config.
inline CameraRig make_rig(const TrainConfig &cfg, int width, int height) {
    CameraRig rig;
    rig.cam_dist = cfg.cam_dist;
    rig.fov_vert = cfg.fov_vert;
    rig.width = width;
    rig.height = height;
    rig.mirror_enabled = cfg.mirror_enabled;
    rig.validate();
    return rig;
}

// ---------------------------------------------------------------------------
// Config file

inline void apply_config_json(TrainConfig &cfg, const nlohmann::json &j) {
    auto num = [&](const char *key, auto &dst) {
        if (auto it = j.find(key); it != j.end()) {
            if (!it->is_number()) throw ParseError(std::string("config.") + key + ": expected a number");
            dst = it->get<std::decay_t<decltype(dst)>>();
        }
    };
    auto flag = [&](const char *key, bool &dst) {
        if (auto it = j.find(key); it != j.end()) {
            if (!it->is_boolean()) throw ParseError(std::string("config.") + key + ": expected a boolean");
            dst = it->get<bool>();
        }
    };
    if (auto it = j.find("mode"); it != j.end()) cfg.mode = mode_from_string(it->get<std::string>());
    num("n_init", cfg.n_init);
    num("iterations", cfg.iterations);
    num("lambda", cfg.lambda);
    num("position_lr_final_factor", cfg.position_lr_final_factor);
    num("cam_dist", cfg.cam_dist);
    num("fov_vert", cfg.fov_vert);
    flag("mirror", cfg.mirror_enabled);
    flag("densify", cfg.densify);
    num("densify_interval", cfg.densify_interval);
    num("densify_until_fraction", cfg.densify_until_fraction);
    num("densify_grad_threshold", cfg.densify_grad_threshold);
    num("percent_dense", cfg.percent_dense);
    num("max_gaussians", cfg.max_gaussians);
    flag("prune", cfg.prune);
    num("prune_opacity", cfg.prune_opacity);
    num("init_opacity", cfg.init_opacity);
    num("eval_interval", cfg.eval_interval);
    flag("eval_ms_ssim", cfg.eval_ms_ssim);
    num("seed", cfg.seed);
    if (auto it = j.find("background"); it != j.end()) {
        if (!it->is_array() || it->size() != 3) throw ParseError("config.background: expected 3 numbers");
        for (int c = 0; c < 3; ++c) cfg.background[c] = (*it)[c].get<double>();
    }
    if (auto it = j.find("lr"); it != j.end()) {
        const nlohmann::json &l = *it;
        auto rate = [&](const char *key, double &dst) {
            if (auto r = l.find(key); r != l.end()) dst = r->get<double>();
        };
        rate("mean", cfg.lr.mean);
        rate("scale", cfg.lr.scale);
        rate("rotation", cfg.lr.rotation);
        rate("opacity", cfg.lr.opacity);
        rate("color", cfg.lr.color);
        rate("gamma", cfg.lr.gamma);
    }
    cfg.validate();
}

// ---------------------------------------------------------------------------
// Geometry of the visible plane

struct PlaneExtents {
    double dev_x;
    double dev_z;
};

/// Half-extents of the XZ region seen by the camera.
inline PlaneExtents plane_extents(double cam_dist, double fov_vert, double aspect) {
    if (!(cam_dist > 0.0)) throw ValidationError("plane_extents: cam_dist must be > 0");
    if (!(fov_vert > 0.0 && fov_vert < kPi)) throw ValidationError("plane_extents: fov_vert must lie in (0, pi)");
    if (!(aspect > 0.0)) throw ValidationError("plane_extents: aspect must be > 0");
    const double dev_z = cam_dist * std::tan(0.5 * fov_vert);
    return {dev_z * aspect, dev_z};
}

inline PlaneExtents plane_extents(const CameraRig &rig) { return plane_extents(rig.cam_dist, rig.fov_vert, rig.aspect()); }

inline double scene_extent(const CameraRig &rig) {
    const PlaneExtents e = plane_extents(rig);
    return std::max(e.dev_x, e.dev_z);
}

// ---------------------------------------------------------------------------
// Constraint projection

/// Projects a scene onto its mode manifold. Idempotent.
inline void constrain(Scene &scene) {
    scene.sync_mode_params();
    for (std::size_t i = 0; i < scene.size(); ++i) {
        FlatGaussian &g = scene.gaussians[i];
        g.scales[0] = kEpsilon;
        switch (scene.mode) {
        case Mode::Amorphous:
            if (std::abs(g.quat.norm() - 1.0) > 1e-12) g.quat /= g.quat.norm();
            break;
        case Mode::TwoD:
            g.mean.y() = 0.0;
            g.quat = quaternion_from_phi(scene.phi[i]);
            break;
        case Mode::Graphite:
            g.mean.y() = scene.gamma[i];
            g.quat = quaternion_from_phi(scene.phi[i]);
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

/// Mean nearest-neighbor distance of 2D points, via a uniform hash grid.
inline double mean_nn_distance(const std::vector<Vec2> &pts, double fallback) {
    if (pts.size() < 2) return fallback;
    Vec2 lo = pts[0], hi = pts[0];
    for (const Vec2 &p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const double area = std::max(1e-12, (hi - lo).prod());
    const double cell = std::max(1e-9, std::sqrt(area / static_cast<double>(pts.size())) * 2.0);
    const int nx = std::max(1, static_cast<int>((hi.x() - lo.x()) / cell) + 1);
    const int ny = std::max(1, static_cast<int>((hi.y() - lo.y()) / cell) + 1);
    std::vector<std::vector<std::size_t>> grid(static_cast<std::size_t>(nx) * ny);
    auto cell_of = [&](const Vec2 &p) {
        const int cx = std::min(nx - 1, static_cast<int>((p.x() - lo.x()) / cell));
        const int cy = std::min(ny - 1, static_cast<int>((p.y() - lo.y()) / cell));
        return std::pair{cx, cy};
    };
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto [cx, cy] = cell_of(pts[i]);
        grid[static_cast<std::size_t>(cy) * nx + cx].push_back(i);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto [cx, cy] = cell_of(pts[i]);
        double best = std::numeric_limits<double>::infinity();
        for (int ring = 1; ring < std::max(nx, ny) + 1; ++ring) {
            for (int y = cy - ring; y <= cy + ring; ++y)
                for (int x = cx - ring; x <= cx + ring; ++x) {
                    if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
                    for (std::size_t j : grid[static_cast<std::size_t>(y) * nx + x])
                        if (j != i) best = std::min(best, (pts[j] - pts[i]).norm());
                }
            // Points beyond `ring` cells are at least (ring) * cell away.
            if (best <= ring * cell) break;
        }
        total += best;
    }
    return total / static_cast<double>(pts.size());
}

} // namespace detail

inline Scene init_scene(const TrainConfig &cfg, const ImageBuffer &target) {
    cfg.validate();
    const CameraRig rig = make_rig(cfg, target.width(), target.height());
    const PlaneExtents ext = plane_extents(rig);
    const Camera cam = make_camera(rig, View::Primary);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> ux(-ext.dev_x, ext.dev_x);
    std::uniform_real_distribution<double> uz(-ext.dev_z, ext.dev_z);
    std::uniform_real_distribution<double> uphi(0.0, 2.0 * kPi);

    Scene scene;
    scene.mode = cfg.mode;
    scene.background = cfg.background;
    scene.rig = rig;
    const std::size_t n = static_cast<std::size_t>(cfg.n_init);
    std::vector<Vec2> pts(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = ux(rng);
        const double z = uz(rng);
        pts[i] = Vec2(x, z);
    }
    const double fallback = std::sqrt(4.0 * ext.dev_x * ext.dev_z / static_cast<double>(n));
    const double spacing = detail::mean_nn_distance(pts, fallback);

    scene.gaussians.resize(n);
    scene.sync_mode_params();
    for (std::size_t i = 0; i < n; ++i) {
        FlatGaussian &g = scene.gaussians[i];
        g.mean = Vec3(pts[i].x(), 0.0, pts[i].y());
        const double phi = uphi(rng);
        g.quat = quaternion_from_phi(phi);
        if (uses_phi(scene.mode)) scene.phi[i] = phi;
        g.scales = Vec3(kEpsilon, spacing, spacing);
        g.opacity_logit = logit(cfg.init_opacity);
        const Vec3 t = cam.to_camera(g.mean);
        const int px = std::clamp(static_cast<int>(std::floor(cam.fx * t.x() / t.z() + cam.cx)), 0, target.width() - 1);
        const int py = std::clamp(static_cast<int>(std::floor(cam.fy * t.y() / t.z() + cam.cy)), 0, target.height() - 1);
        g.color = target.pixel(px, py);
    }
    constrain(scene);
    return scene;
}

// ---------------------------------------------------------------------------
// Objective

struct LossValue {
    double value = 0.0;
    ImageBuffer grad;
};

/// (1 - lambda) L1 + lambda D-SSIM, with its gradient w.r.t. `rendered`.
inline LossValue loss(const ImageBuffer &rendered, const ImageBuffer &target, double lambda) {
    require_same_shape(rendered, target, "loss");
    LossValue out;
    ImageBuffer g1;
    const double v1 = l1(rendered, target, &g1);
    out.value = (1.0 - lambda) * v1;
    out.grad = std::move(g1);
    for (double &v : out.grad.data()) v *= (1.0 - lambda);
    if (lambda > 0.0) {
        ImageBuffer g2;
        out.value += lambda * dssim(rendered, target, &g2);
        for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad.data()[i] += lambda * g2.data()[i];
    }
    return out;
}

struct ObjectiveResult {
    double total = 0.0;
    double primary = 0.0;
    double mirror = 0.0;
    ParamGrads grads;
    ImageBuffer primary_render;
};

inline ObjectiveResult single_view_objective(const Scene &scene, const Camera &cam, const ImageBuffer &target,
                                             double lambda, ImageBuffer *rendered_out = nullptr,
                                             RenderState *scratch = nullptr) {
    RenderState local;
    RenderState &st = scratch ? *scratch : local;
    ImageBuffer img = render(scene, cam, scene.background, &st);
    LossValue lv = loss(img, target, lambda);
    ObjectiveResult r;
    r.total = lv.value;
    r.primary = lv.value;
    r.grads = render_backward(scene, cam, st, lv.grad);
    if (rendered_out) *rendered_out = std::move(img);
    return r;
}

/// L(render_primary, I) + L(render_mirror, hflip(I)); reduces to the first
/// term when the rig has the mirror disabled.
/// `scratch`, when given, holds two render states reused across calls.
inline ObjectiveResult mirror_objective(const Scene &scene, const CameraRig &rig, const ImageBuffer &target,
                                        double lambda, const ImageBuffer *flipped_target = nullptr,
                                        RenderState *scratch = nullptr) {
    const Camera primary = make_camera(rig, View::Primary);
    if (target.width() != primary.width || target.height() != primary.height)
        throw ShapeError("mirror_objective: target resolution does not match the camera rig");
    ImageBuffer rendered;
    ObjectiveResult r = single_view_objective(scene, primary, target, lambda, &rendered, scratch);
    r.primary_render = std::move(rendered);
    if (!rig.mirror_enabled) return r;
    const Camera mirror = make_camera(rig, View::Mirror);
    ImageBuffer flipped_local;
    if (!flipped_target) {
        flipped_local = hflip(target);
        flipped_target = &flipped_local;
    }
    ObjectiveResult m = single_view_objective(scene, mirror, *flipped_target, lambda, nullptr,
                                              scratch ? scratch + 1 : nullptr);
    r.mirror = m.primary;
    r.total += m.primary;
    r.grads.add(m.grads);
    return r;
}

// ---------------------------------------------------------------------------
// Optimizer

enum class ParamGroup { Mean, Rotation, Gamma, Scale, Opacity, Color };

/// Per-Gaussian optimizer slots:
///   0-2 mean, 3-6 quaternion, 7 phi, 8 gamma, 9-10 log s2 / log s3,
///   11 opacity logit, 12-14 color.
inline constexpr int kSlots = 15;
using SlotArray = std::array<double, kSlots>;

inline ParamGroup slot_group(int s) {
    if (s <= 2) return ParamGroup::Mean;
    if (s <= 7) return ParamGroup::Rotation;
    if (s == 8) return ParamGroup::Gamma;
    if (s <= 10) return ParamGroup::Scale;
    if (s == 11) return ParamGroup::Opacity;
    return ParamGroup::Color;
}

inline bool slot_active(Mode mode, int s) {
    switch (mode) {
    case Mode::Amorphous: return s != 7 && s != 8;
    case Mode::TwoD: return s != 1 && !(s >= 3 && s <= 6) && s != 8;
    case Mode::Graphite: return s != 1 && !(s >= 3 && s <= 6);
    }
    return false;
}

inline SlotArray pack_params(const Scene &scene, std::size_t i) {
    const FlatGaussian &g = scene.gaussians[i];
    SlotArray p{};
    for (int k = 0; k < 3; ++k) p[k] = g.mean[k];
    for (int k = 0; k < 4; ++k) p[3 + k] = g.quat[k];
    p[7] = i < scene.phi.size() ? scene.phi[i] : 0.0;
    p[8] = i < scene.gamma.size() ? scene.gamma[i] : 0.0;
    p[9] = std::log(g.scales[1]);
    p[10] = std::log(g.scales[2]);
    p[11] = g.opacity_logit;
    for (int k = 0; k < 3; ++k) p[12 + k] = g.color[k];
    return p;
}

inline void unpack_params(Scene &scene, std::size_t i, const SlotArray &p) {
    FlatGaussian &g = scene.gaussians[i];
    for (int k = 0; k < 3; ++k) g.mean[k] = p[k];
    for (int k = 0; k < 4; ++k) g.quat[k] = p[3 + k];
    if (i < scene.phi.size()) scene.phi[i] = p[7];
    if (i < scene.gamma.size()) scene.gamma[i] = p[8];
    // exp(log(s)) is not always s; leave untouched scales bit-exact.
    if (p[9] != std::log(g.scales[1])) g.scales[1] = std::exp(p[9]);
    if (p[10] != std::log(g.scales[2])) g.scales[2] = std::exp(p[10]);
    g.opacity_logit = p[11];
    for (int k = 0; k < 3; ++k) g.color[k] = std::clamp(p[12 + k], 0.0, 1.0);
}

/// Gradient in slot space (log scales instead of scales).
inline SlotArray pack_grads(const Scene &scene, std::size_t i, const GaussianGrad &g) {
    SlotArray out{};
    for (int k = 0; k < 3; ++k) out[k] = g.mean[k];
    for (int k = 0; k < 4; ++k) out[3 + k] = g.quat[k];
    out[7] = g.phi;
    out[8] = g.gamma;
    out[9] = g.scales[1] * scene.gaussians[i].scales[1];
    out[10] = g.scales[2] * scene.gaussians[i].scales[2];
    out[11] = g.opacity_logit;
    for (int k = 0; k < 3; ++k) out[12 + k] = g.color[k];
    return out;
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
    long step = 0;
    std::vector<SlotArray> m;
    std::vector<SlotArray> v;

    void resize(std::size_t n) {
        m.resize(n, SlotArray{});
        v.resize(n, SlotArray{});
    }

    /// Keeps rows by index; indices past the current size start from zero
    /// moments.
    void remap(const std::vector<std::ptrdiff_t> &from) {
        std::vector<SlotArray> nm(from.size(), SlotArray{}), nv(from.size(), SlotArray{});
        for (std::size_t k = 0; k < from.size(); ++k) {
            if (from[k] >= 0 && static_cast<std::size_t>(from[k]) < m.size()) {
                nm[k] = m[from[k]];
                nv[k] = v[from[k]];
            }
        }
        m = std::move(nm);
        v = std::move(nv);
    }
};

// ---------------------------------------------------------------------------
// Training loop

struct DensifyStats {
    std::vector<double> grad_accum;
    std::vector<int> seen;

    void resize(std::size_t n) {
        grad_accum.assign(n, 0.0);
        seen.assign(n, 0);
    }
};

struct TrainerState {
    AdamState adam;
    DensifyStats densify;
    std::mt19937_64 rng{0};
    int iteration = 0;
    double extent = 1.0;
    std::array<RenderState, 2> render_scratch;
};

struct StepStats {
    double loss = 0.0;
    double loss_primary = 0.0;
    double loss_mirror = 0.0;
    std::array<double, 6> grad_norm{}; // indexed by ParamGroup
    ImageBuffer primary_render;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

inline std::string first_non_finite(const Scene &scene) {
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const FlatGaussian &g = scene.gaussians[i];
        auto bad = [](const auto &v) { return !v.allFinite(); };
        if (bad(g.mean)) return "gaussian " + std::to_string(i) + " mean";
        if (bad(g.quat)) return "gaussian " + std::to_string(i) + " quat";
        if (bad(g.scales)) return "gaussian " + std::to_string(i) + " scales";
        if (!std::isfinite(g.opacity_logit)) return "gaussian " + std::to_string(i) + " opacity_logit";
        if (bad(g.color)) return "gaussian " + std::to_string(i) + " color";
        if (i < scene.phi.size() && !std::isfinite(scene.phi[i])) return "gaussian " + std::to_string(i) + " phi";
        if (i < scene.gamma.size() && !std::isfinite(scene.gamma[i])) return "gaussian " + std::to_string(i) + " gamma";
    }
    return "none (non-finite value arose in the objective)";
}

inline double position_lr_factor(const TrainConfig &cfg, int iteration) {
    if (cfg.iterations <= 1 || cfg.position_lr_final_factor == 1.0) return 1.0;
    const double t = std::clamp(static_cast<double>(iteration) / (cfg.iterations - 1), 0.0, 1.0);
    return std::exp(t * std::log(cfg.position_lr_final_factor));
}

inline double group_lr(const TrainConfig &cfg, const TrainerState &state, ParamGroup g) {
    const double pos = position_lr_factor(cfg, state.iteration);
    switch (g) {
    case ParamGroup::Mean: return cfg.lr.mean * state.extent * pos;
    case ParamGroup::Rotation: return cfg.lr.rotation;
    case ParamGroup::Gamma: return cfg.lr.gamma * pos;
    case ParamGroup::Scale: return cfg.lr.scale;
    case ParamGroup::Opacity: return cfg.lr.opacity;
    case ParamGroup::Color: return cfg.lr.color;
    }
    return 0.0;
}

inline TrainerState make_trainer_state(const Scene &scene, const CameraRig &rig, const TrainConfig &cfg) {
    TrainerState st;
    st.adam.resize(scene.size());
    st.densify.resize(scene.size());
    st.rng.seed(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    st.extent = scene_extent(rig);
    return st;
}

/// One forward/backward over the rig, one Adam update, then constrain().
inline StepStats train_step(Scene &scene, const CameraRig &rig, const ImageBuffer &target, const TrainConfig &cfg,
                            TrainerState &state, const ImageBuffer *flipped_target = nullptr) {
    ObjectiveResult obj = mirror_objective(scene, rig, target, cfg.lambda, flipped_target, state.render_scratch.data());
    StepStats stats;
    stats.loss = obj.total;
    stats.loss_primary = obj.primary;
    stats.loss_mirror = obj.mirror;
    stats.primary_render = std::move(obj.primary_render);
    if (!std::isfinite(obj.total)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(state.iteration) +
                            "; first non-finite parameter: " + first_non_finite(scene));
    }

    state.adam.resize(scene.size());
    if (state.densify.seen.size() != scene.size()) state.densify.resize(scene.size());
    ++state.adam.step;
    const double bc1 = 1.0 - std::pow(state.adam.beta1, static_cast<double>(state.adam.step));
    const double bc2 = 1.0 - std::pow(state.adam.beta2, static_cast<double>(state.adam.step));
    std::array<double, 6> lr{};
    for (int g = 0; g < 6; ++g) lr[g] = group_lr(cfg, state, static_cast<ParamGroup>(g));

    for (std::size_t i = 0; i < scene.size(); ++i) {
        const GaussianGrad &gg = obj.grads.g[i];
        const SlotArray grad = pack_grads(scene, i, gg);
        SlotArray p = pack_params(scene, i);
        SlotArray &m = state.adam.m[i];
        SlotArray &v = state.adam.v[i];
        for (int s = 0; s < kSlots; ++s) {
            if (!slot_active(scene.mode, s)) continue;
            const int group = static_cast<int>(slot_group(s));
            stats.grad_norm[group] += grad[s] * grad[s];
            m[s] = state.adam.beta1 * m[s] + (1.0 - state.adam.beta1) * grad[s];
            v[s] = state.adam.beta2 * v[s] + (1.0 - state.adam.beta2) * grad[s] * grad[s];
            const double step = lr[group] * (m[s] / bc1) / (std::sqrt(v[s] / bc2) + state.adam.eps);
            p[s] -= step;
        }
        unpack_params(scene, i, p);

        Vec3 pos_grad = gg.mean;
        if (scene.mode != Mode::Amorphous) pos_grad.y() = 0.0;
        const double gn = pos_grad.norm();
        if (gn > 0.0) {
            state.densify.grad_accum[i] += gn;
            ++state.densify.seen[i];
        }
    }
    for (double &n : stats.grad_norm) n = std::sqrt(n);
    constrain(scene);
    ++state.iteration;
    return stats;
}

/// Prunes near-transparent Gaussians and clones (small) or splits (large)
/// the ones whose mean positional gradient exceeds the threshold.
inline void densify_and_prune(Scene &scene, TrainerState &state, const TrainConfig &cfg) {
    const std::size_t n = scene.size();
    if (state.densify.seen.size() != n) state.densify.resize(n);
    state.adam.resize(n);
    const double threshold = cfg.densify_grad_threshold * state.extent;
    const double dense_scale = cfg.percent_dense * state.extent;
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<std::size_t> survivors;
    std::vector<std::ptrdiff_t> from;
    std::vector<FlatGaussian> added;
    std::vector<double> added_phi, added_gamma;
    std::size_t budget = cfg.max_gaussians > 0 ? static_cast<std::size_t>(cfg.max_gaussians) : SIZE_MAX;
    std::size_t projected_count = n;

    for (std::size_t i = 0; i < n; ++i) {
        const FlatGaussian &g = scene.gaussians[i];
        const bool pruned = cfg.prune && g.opacity() < cfg.prune_opacity;
        const double avg = state.densify.seen[i] > 0 ? state.densify.grad_accum[i] / state.densify.seen[i] : 0.0;
        const bool hot = cfg.densify && avg > threshold && !pruned;
        const bool large = std::max(g.scales[1], g.scales[2]) > dense_scale;
        const double phi = i < scene.phi.size() ? scene.phi[i] : 0.0;
        const double gam = i < scene.gamma.size() ? scene.gamma[i] : 0.0;

        if (pruned) {
            --projected_count;
            continue;
        }
        if (hot && projected_count + 1 <= budget) {
            if (large) {
                const Mat3 r = g.rotation();
                for (int copy = 0; copy < 2; ++copy) {
                    FlatGaussian c = g;
                    const Vec3 offset = r * Vec3(0.0, g.scales[1] * normal(state.rng), g.scales[2] * normal(state.rng));
                    c.mean = g.mean + offset;
                    c.scales[1] = g.scales[1] / 1.6;
                    c.scales[2] = g.scales[2] / 1.6;
                    added.push_back(c);
                    added_phi.push_back(phi);
                    added_gamma.push_back(gam);
                }
                ++projected_count;
                continue; // the original is replaced by its two halves
            }
            added.push_back(g);
            added_phi.push_back(phi);
            added_gamma.push_back(gam);
            ++projected_count;
        }
        survivors.push_back(i);
        from.push_back(static_cast<std::ptrdiff_t>(i));
    }

    const bool has_phi = !scene.phi.empty();
    const bool has_gamma = !scene.gamma.empty();
    scene.keep(survivors);
    for (std::size_t k = 0; k < added.size(); ++k) {
        scene.gaussians.push_back(added[k]);
        if (has_phi) scene.phi.push_back(added_phi[k]);
        if (has_gamma) scene.gamma.push_back(added_gamma[k]);
        from.push_back(-1);
    }
    state.adam.remap(from);
    state.densify.resize(scene.size());
    constrain(scene);
}

struct HistoryEntry {
    int iteration = 0;
    double loss = 0.0;
    double loss_primary = 0.0;
    double loss_mirror = 0.0;
    double psnr = 0.0;
    double ms_ssim = -1.0;
    std::size_t gaussians = 0;
};

inline nlohmann::json to_json(const HistoryEntry &e, bool mirror) {
    nlohmann::json j = {{"iteration", e.iteration}, {"loss", e.loss}, {"psnr", e.psnr}, {"gaussians", e.gaussians}};
    if (mirror) {
        j["loss_primary"] = e.loss_primary;
        j["loss_mirror"] = e.loss_mirror;
    }
    if (e.ms_ssim >= 0.0) j["ms_ssim"] = e.ms_ssim;
    return j;
}

struct TrainResult {
    Scene scene;
    std::vector<HistoryEntry> history;
    std::vector<double> losses; // one per iteration
    MetricReport final_report;
};

using TrainCallback = std::function<void(const HistoryEntry &)>;

inline TrainResult train(const ImageBuffer &target, const TrainConfig &cfg, const TrainCallback &on_eval = {}) {
    cfg.validate();
    if (target.width() < 1 || target.height() < 1) throw ShapeError("train: empty target image");
    TrainResult out;
    out.scene = init_scene(cfg, target);
    const CameraRig rig = *out.scene.rig;
    TrainerState state = make_trainer_state(out.scene, rig, cfg);
    const ImageBuffer flipped = hflip(target);
    const int densify_until = static_cast<int>(cfg.densify_until_fraction * cfg.iterations);
    const Camera primary = make_camera(rig, View::Primary);

    auto log_entry = [&](int it, const StepStats *s, const ImageBuffer &rendered) {
        HistoryEntry e;
        e.iteration = it;
        if (s) {
            e.loss = s->loss;
            e.loss_primary = s->loss_primary;
            e.loss_mirror = s->loss_mirror;
        }
        e.psnr = psnr(rendered, target);
        if (cfg.eval_ms_ssim && target.width() >= kSsimWindow && target.height() >= kSsimWindow)
            e.ms_ssim = ms_ssim(rendered, target);
        e.gaussians = out.scene.size();
        out.history.push_back(e);
        if (on_eval) on_eval(e);
    };

    for (int it = 1; it <= cfg.iterations; ++it) {
        StepStats s = train_step(out.scene, rig, target, cfg, state, &flipped);
        out.losses.push_back(s.loss);
        if (cfg.eval_interval > 0 && (it % cfg.eval_interval == 0) && it != cfg.iterations)
            log_entry(it, &s, s.primary_render);
        if ((cfg.densify || cfg.prune) && cfg.densify_interval > 0 && it % cfg.densify_interval == 0 &&
            it <= densify_until) {
            densify_and_prune(out.scene, state, cfg);
        }
    }
    const ImageBuffer final_render = render(out.scene, primary, out.scene.background);
    out.final_report.psnr = psnr(final_render, target);
    out.final_report.l1 = l1(final_render, target);
    out.final_report.ms_ssim = (target.width() >= kSsimWindow && target.height() >= kSsimWindow)
                                   ? ms_ssim(final_render, target)
                                   : 0.0;
    HistoryEntry last;
    last.iteration = cfg.iterations;
    if (!out.losses.empty()) last.loss = out.losses.back();
    last.psnr = out.final_report.psnr;
    last.ms_ssim = out.final_report.ms_ssim;
    last.gaussians = out.scene.size();
    out.history.push_back(last);
    if (on_eval) on_eval(last);
    return out;
}

} // namespace mirage
