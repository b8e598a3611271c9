// mirage: train, render, evaluate, edit and simulate flat-Gaussian images.

#include "mirage/camera.hpp"
#include "mirage/edit.hpp"
#include "mirage/io.hpp"
#include "mirage/metrics.hpp"
#include "mirage/physics.hpp"
#include "mirage/rasterizer.hpp"
#include "mirage/service.hpp"
#include "mirage/trainer.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace mirage;

namespace {

class UsageError : public Error {
public:
    using Error::Error;
};

struct Globals {
    std::string out_dir = ".";
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

fs::path output_path(const Globals &g, const std::string &name) {
    const fs::path rel(name);
    if (rel.is_absolute() || rel.empty())
        throw UsageError("output '" + name + "' must be a relative file name under --out-dir");
    for (const auto &part : rel)
        if (part == "..") throw UsageError("output '" + name + "' must not leave --out-dir");
    fs::create_directories(g.out_dir);
    const fs::path p = fs::path(g.out_dir) / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
}

nlohmann::json read_json(const std::string &path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(path + ": invalid JSON: " + e.what());
    }
}

nlohmann::json config_json(const Globals &g) { return g.config.empty() ? nlohmann::json::object() : read_json(g.config); }

View parse_view(const std::string &s) {
    if (s == "primary") return View::Primary;
    if (s == "mirror") return View::Mirror;
    throw UsageError("--camera must be primary or mirror, got '" + s + "'");
}

Camera scene_camera(const Scene &scene, View view, int width = 0, int height = 0) {
    return make_camera(scene.rig.value_or(CameraRig{}), view, width, height);
}

std::vector<double> parse_numbers(const std::string &text, std::size_t expected, const char *flag) {
    std::vector<double> out;
    std::stringstream ss(text);
    for (std::string tok; std::getline(ss, tok, ',');) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception &) {
            throw UsageError(std::string(flag) + ": bad number '" + tok + "'");
        }
    }
    if (expected && out.size() != expected)
        throw UsageError(std::string(flag) + ": expected " + std::to_string(expected) + " comma-separated numbers");
    return out;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string image, mode, mirror, out = "scene.json";
    int n_init = 0, iters = -1, max_gaussians = -1;
    bool ms_ssim = false;
};

int cmd_train(const Globals &g, const TrainArgs &a, CLI::App &sub) {
    TrainConfig cfg;
    apply_config_json(cfg, config_json(g));
    if (sub.count("--mode")) cfg.mode = mode_from_string(a.mode);
    if (sub.count("--n-init")) cfg.n_init = a.n_init;
    if (sub.count("--iters")) cfg.iterations = a.iters;
    if (sub.count("--max-gaussians")) cfg.max_gaussians = a.max_gaussians;
    if (sub.count("--mirror")) cfg.mirror_enabled = a.mirror == "on";
    if (a.ms_ssim) cfg.eval_ms_ssim = true;
    if (g.seed_set) cfg.seed = g.seed;
    cfg.validate();

    const ImageBuffer target = image_load(a.image);
    const fs::path scene_out = output_path(g, a.out);
    const fs::path log_out = output_path(g, "metrics.jsonl");
    std::ofstream log(log_out);
    if (!log) throw Error("cannot open " + log_out.string() + " for writing");

    TrainResult r = train(target, cfg, [&](const HistoryEntry &e) {
        log << to_json(e, cfg.mirror_enabled).dump() << '\n';
        log.flush();
        std::fprintf(stderr, "iter %5d  loss %.5f  psnr %.2f dB  gaussians %zu\n", e.iteration, e.loss, e.psnr,
                     e.gaussians);
    });
    nlohmann::json final_line = to_json(r.final_report);
    final_line["final"] = true;
    final_line["iteration"] = cfg.iterations;
    final_line["gaussians"] = r.scene.size();
    log << final_line.dump() << '\n';
    scene_save(r.scene, scene_out);
    std::cout << final_line.dump() << '\n';
    return 0;
}

struct RenderArgs {
    std::string scene, out = "render.png", camera = "primary";
    int width = 0, height = 0;
};

int cmd_render(const Globals &g, const RenderArgs &a) {
    const Scene scene = scene_load(a.scene);
    if (a.width < 0 || a.height < 0) throw UsageError("--width and --height must be positive");
    image_save(render(scene, scene_camera(scene, parse_view(a.camera), a.width, a.height)), output_path(g, a.out));
    return 0;
}

struct EvalArgs {
    std::string scene, image, camera = "primary";
};

int cmd_eval(const EvalArgs &a) {
    const Scene scene = scene_load(a.scene);
    const ImageBuffer target = image_load(a.image);
    const CameraRig rig = scene.rig.value_or(CameraRig{});
    if (target.width() != rig.width || target.height() != rig.height)
        throw ShapeError("eval: image is " + std::to_string(target.width()) + "x" + std::to_string(target.height()) +
                         " but the scene renders at " + std::to_string(rig.width) + "x" + std::to_string(rig.height));
    const View view = parse_view(a.camera);
    const ImageBuffer rendered = render(scene, make_camera(rig, view));
    std::cout << to_json(evaluate(rendered, view == View::Mirror ? hflip(target) : target)).dump() << '\n';
    return 0;
}

struct ExportArgs {
    std::string scene, out = "soup.obj";
};

int cmd_export(const Globals &g, const ExportArgs &a) {
    const Scene scene = scene_load(a.scene);
    mesh_format_for(a.out);
    export_soup(scene, output_path(g, a.out));
    return 0;
}

struct ImportArgs {
    std::string scene, mesh, out = "scene.json";
};

int cmd_import(const Globals &g, const ImportArgs &a) {
    const Scene base = scene_load(a.scene);
    scene_save(import_soup(base, a.mesh), output_path(g, a.out));
    return 0;
}

struct EditArgs {
    std::string scene, out = "scene.json";
    std::string indices, rect, translate, rotate, scale, matrix, edits;
    double bend = 0.0, bend_center = 0.0;
    bool bend_vertical = false, fill = false;
};

int cmd_edit(const Globals &g, const EditArgs &a, CLI::App &sub) {
    Scene scene = scene_load(a.scene);
    Selection sel = select_all(scene);
    if (!a.indices.empty()) {
        std::vector<std::size_t> idx;
        for (double v : parse_numbers(a.indices, 0, "--indices")) {
            if (v < 0 || v != std::floor(v)) throw UsageError("--indices: expected non-negative integers");
            idx.push_back(static_cast<std::size_t>(v));
        }
        sel = select_indices(scene, idx);
    }
    if (!a.rect.empty()) {
        const auto r = parse_numbers(a.rect, 4, "--rect");
        sel = select_rect(scene, r[0], r[1], r[2], r[3]);
    }
    const EditOptions opts{a.fill};

    Mat4 m = Mat4::Identity();
    bool affine = false;
    if (!a.matrix.empty()) {
        const auto v = parse_numbers(a.matrix, 16, "--matrix");
        for (int i = 0; i < 16; ++i) m(i / 4, i % 4) = v[i];
        affine = true;
    }
    if (!a.scale.empty()) {
        const auto v = parse_numbers(a.scale, 0, "--scale");
        if (v.size() != 1 && v.size() != 3) throw UsageError("--scale: expected 1 or 3 numbers");
        Mat4 s = Mat4::Identity();
        for (int i = 0; i < 3; ++i) s(i, i) = v.size() == 1 ? v[0] : v[i];
        m = s * m;
        affine = true;
    }
    if (!a.rotate.empty()) {
        const auto v = parse_numbers(a.rotate, 4, "--rotate");
        const Vec3 axis(v[0], v[1], v[2]);
        if (axis.norm() < 1e-12) throw UsageError("--rotate: axis must be non-zero");
        Mat4 r = Mat4::Identity();
        r.topLeftCorner<3, 3>() = Eigen::AngleAxisd(v[3], axis.normalized()).toRotationMatrix();
        m = r * m;
        affine = true;
    }
    if (!a.translate.empty()) {
        const auto v = parse_numbers(a.translate, 3, "--translate");
        Mat4 t = Mat4::Identity();
        t.topRightCorner<3, 1>() = Vec3(v[0], v[1], v[2]);
        m = t * m;
        affine = true;
    }
    if (affine) {
        // Transforms act about the selection centroid.
        Vec3 c = Vec3::Zero();
        for (std::size_t i : sel.indices) c += scene.gaussians[i].mean;
        if (!sel.empty()) c /= static_cast<double>(sel.size());
        Mat4 to = Mat4::Identity(), from = Mat4::Identity();
        to.topRightCorner<3, 1>() = -c;
        from.topRightCorner<3, 1>() = c;
        scene = apply_affine(scene, sel, from * m * to, opts);
    }
    if (sub.count("--bend")) scene = bend(scene, sel, a.bend, a.bend_center, !a.bend_vertical, opts);
    if (!a.edits.empty()) {
        const nlohmann::json j = read_json(a.edits);
        const nlohmann::json &list = j.is_array() ? j : detail::field(j, "edits", "edits");
        std::map<std::size_t, std::array<Vec3, 3>> moves;
        for (std::size_t e = 0; e < list.size(); ++e) {
            const std::string path = "edits[" + std::to_string(e) + "]";
            const double gi = detail::number(detail::field(list[e], "gaussian", path), path + ".gaussian");
            const double vk = detail::number(detail::field(list[e], "vertex", path), path + ".vertex");
            if (gi < 0 || gi >= static_cast<double>(scene.size()) || gi != std::floor(gi))
                throw ValidationError(path + ".gaussian: index out of range");
            if (vk != 0 && vk != 1 && vk != 2) throw ValidationError(path + ".vertex: expected 0, 1 or 2");
            const auto i = static_cast<std::size_t>(gi);
            const Vec3 target = detail::fixed_vec<3>(detail::field(list[e], "position", path), path + ".position");
            auto [it, fresh] = moves.try_emplace(i, std::array<Vec3, 3>{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()});
            it->second[static_cast<int>(vk)] = target - face_of(scene, i).v[static_cast<int>(vk)];
        }
        scene = displace(scene, moves, opts);
    }
    scene_save(scene, output_path(g, a.out));
    return 0;
}

struct AnimateArgs {
    std::string scene, tracks, camera = "primary";
    int frames = 10, width = 0, height = 0;
};

int cmd_animate(const Globals &g, const AnimateArgs &a) {
    const Scene scene = scene_load(a.scene);
    if (a.frames < 1) throw UsageError("--frames must be >= 1");
    const std::vector<Track> tracks = tracks_from_json(scene, read_json(a.tracks));
    const Camera cam = scene_camera(scene, parse_view(a.camera), a.width, a.height);
    fs::create_directories(g.out_dir);
    write_frames(animate(scene, tracks, a.frames, cam), g.out_dir);
    return 0;
}

struct SimulateArgs {
    std::string scene, camera = "primary";
    int frames = -1, substeps = -1, grid = -1, trajectory = -1;
    bool save_scenes = false;
};

int cmd_simulate(const Globals &g, const SimulateArgs &a, CLI::App &sub) {
    const Scene scene = scene_load(a.scene);
    MaterialParams mat;
    SimulateOptions opt;
    const nlohmann::json cfg = config_json(g);
    const bool has_dt = cfg.contains("physics") && cfg["physics"].contains("dt");
    if (cfg.contains("physics")) apply_physics_json(mat, opt, cfg["physics"]);
    if (sub.count("--frames")) opt.frames = static_cast<std::size_t>(a.frames);
    if (sub.count("--substeps")) opt.substeps = static_cast<std::size_t>(a.substeps);
    if (sub.count("--grid")) opt.grid_resolution = a.grid;
    if (sub.count("--trajectory")) opt.trajectory_samples = static_cast<std::size_t>(a.trajectory);
    if (g.seed_set) opt.seed = g.seed;
    const View view = parse_view(a.camera);
    if (scene.mode == Mode::TwoD && scene.rig && !has_dt) mat.dt = mat.max_dt(grid_for(*scene.rig, opt.grid_resolution).dx);

    std::vector<TrajectoryRow> traj;
    fs::create_directories(g.out_dir);
    const Camera cam = scene_camera(scene, view);
    simulate(scene, mat, opt, &traj, [&](std::size_t k, const Scene &s) {
        char name[32];
        std::snprintf(name, sizeof name, "out_%04zu.png", k);
        image_save(render(s, cam), fs::path(g.out_dir) / name);
        if (a.save_scenes) {
            std::snprintf(name, sizeof name, "scene_%04zu.json", k);
            scene_save(s, fs::path(g.out_dir) / name);
        }
        std::fprintf(stderr, "frame %zu/%zu\n", k + 1, opt.frames);
        return true;
    });
    if (opt.trajectory_samples > 0) {
        std::ofstream out(fs::path(g.out_dir) / "trajectory.csv");
        out << trajectory_csv(traj);
    }
    return 0;
}

struct ServeArgs {
    int port = 7878;
    std::string scene, ui_dir;
};

Service *g_service = nullptr;

int cmd_serve(const ServeArgs &a) {
    ServiceConfig cfg;
    cfg.port = a.port;
    cfg.static_dir = a.ui_dir;
    Service service(cfg);
    if (!a.scene.empty()) std::fprintf(stderr, "session %s\n", service.create_session(scene_load(a.scene)).c_str());
    g_service = &service;
    std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
    });
    std::fprintf(stderr, "listening on http://%s:%d\n", cfg.host.c_str(), cfg.port);
    if (!service.listen()) throw Error("serve: cannot listen on port " + std::to_string(cfg.port));
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"mirage: flat-Gaussian image representation, editing and physics"};
    app.require_subcommand(1, 1);
    app.fallthrough();
    Globals g;
    app.add_option("--out-dir", g.out_dir, "Directory for every file this command writes")->capture_default_str();
    app.add_option("--config", g.config, "JSON config file (flags override it)")->check(CLI::ExistingFile);
    auto *seed_opt = app.add_option("--seed", g.seed, "Random seed");

    TrainArgs ta;
    CLI::App *train = app.add_subcommand("train", "Fit an image");
    train->add_option("--image", ta.image, "Target image (PNG or PPM)")->required()->check(CLI::ExistingFile);
    train->add_option("--mode", ta.mode, "amorphous, 2d or graphite")
        ->check(CLI::IsMember({"amorphous", "2d", "graphite"}));
    train->add_option("--n-init", ta.n_init, "Initial Gaussian count")->check(CLI::PositiveNumber);
    train->add_option("--iters", ta.iters, "Training iterations")->check(CLI::NonNegativeNumber);
    train->add_option("--max-gaussians", ta.max_gaussians, "Densification cap (0: none)")->check(CLI::NonNegativeNumber);
    train->add_option("--mirror", ta.mirror, "Mirror camera on|off")->check(CLI::IsMember({"on", "off"}));
    train->add_option("--out", ta.out, "Scene file name")->capture_default_str();
    train->add_flag("--ms-ssim", ta.ms_ssim, "Log MS-SSIM at each evaluation");

    RenderArgs ra;
    CLI::App *rend = app.add_subcommand("render", "Render a scene to PNG");
    rend->add_option("--scene", ra.scene)->required()->check(CLI::ExistingFile);
    rend->add_option("--out", ra.out)->capture_default_str();
    rend->add_option("--camera", ra.camera)->capture_default_str();
    rend->add_option("--width", ra.width);
    rend->add_option("--height", ra.height);

    EvalArgs ea;
    CLI::App *eval = app.add_subcommand("eval", "Print PSNR / MS-SSIM / L1 of a scene against an image");
    eval->add_option("--scene", ea.scene)->required()->check(CLI::ExistingFile);
    eval->add_option("--image", ea.image)->required()->check(CLI::ExistingFile);
    eval->add_option("--camera", ea.camera)->capture_default_str();

    ExportArgs xa;
    CLI::App *exp = app.add_subcommand("export", "Write the triangle soup (OBJ or PLY) plus a sidecar");
    exp->add_option("--scene", xa.scene)->required()->check(CLI::ExistingFile);
    exp->add_option("--out", xa.out)->capture_default_str();

    ImportArgs ia;
    CLI::App *imp = app.add_subcommand("import", "Rebuild a scene from an edited soup");
    imp->add_option("--scene", ia.scene, "Scene the soup was exported from")->required()->check(CLI::ExistingFile);
    imp->add_option("--mesh", ia.mesh)->required()->check(CLI::ExistingFile);
    imp->add_option("--out", ia.out)->capture_default_str();

    EditArgs da;
    CLI::App *edit = app.add_subcommand("edit", "Deform a selection of Gaussians");
    edit->add_option("--scene", da.scene)->required()->check(CLI::ExistingFile);
    edit->add_option("--out", da.out)->capture_default_str();
    edit->add_option("--indices", da.indices, "Select Gaussians by index: i,j,k");
    edit->add_option("--rect", da.rect, "Select means in x0,z0,x1,z1");
    edit->add_option("--translate", da.translate, "x,y,z");
    edit->add_option("--rotate", da.rotate, "ax,ay,az,angle (radians) about the selection centroid");
    edit->add_option("--scale", da.scale, "s or sx,sy,sz about the selection centroid");
    edit->add_option("--matrix", da.matrix, "16 row-major numbers about the selection centroid");
    edit->add_option("--bend", da.bend, "Roll onto a cylinder of this radius");
    edit->add_option("--bend-center", da.bend_center, "Coordinate of the bend line");
    edit->add_flag("--bend-vertical", da.bend_vertical, "Bend line along x instead of z");
    edit->add_option("--edits", da.edits, "JSON list of {gaussian, vertex, position}")->check(CLI::ExistingFile);
    edit->add_flag("--fill-vacated", da.fill, "Leave background-colored copies where the selection was");

    AnimateArgs aa;
    CLI::App *anim = app.add_subcommand("animate", "Render keyframed tracks to out_NNNN.png");
    anim->add_option("--scene", aa.scene)->required()->check(CLI::ExistingFile);
    anim->add_option("--tracks", aa.tracks)->required()->check(CLI::ExistingFile);
    anim->add_option("--frames", aa.frames)->capture_default_str();
    anim->add_option("--camera", aa.camera)->capture_default_str();
    anim->add_option("--width", aa.width);
    anim->add_option("--height", aa.height);

    SimulateArgs sa;
    CLI::App *sim = app.add_subcommand("simulate", "Run the 2D physics and render out_NNNN.png");
    sim->add_option("--scene", sa.scene)->required()->check(CLI::ExistingFile);
    sim->add_option("--frames", sa.frames)->check(CLI::PositiveNumber);
    sim->add_option("--substeps", sa.substeps)->check(CLI::PositiveNumber);
    sim->add_option("--grid", sa.grid)->check(CLI::Range(8, 4096));
    sim->add_option("--trajectory", sa.trajectory, "Particles to log in trajectory.csv")->check(CLI::NonNegativeNumber);
    sim->add_option("--camera", sa.camera)->capture_default_str();
    sim->add_flag("--save-scenes", sa.save_scenes, "Also write scene_NNNN.json per frame");

    ServeArgs va;
    CLI::App *serve = app.add_subcommand("serve", "HTTP session server on 127.0.0.1");
    serve->add_option("--port", va.port)->capture_default_str()->check(CLI::Range(1, 65535));
    serve->add_option("--scene", va.scene, "Preload a session")->check(CLI::ExistingFile);
    serve->add_option("--ui-dir", va.ui_dir, "Static files served at /")->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    g.seed_set = seed_opt->count() > 0;

    try {
        if (*train) return cmd_train(g, ta, *train);
        if (*rend) return cmd_render(g, ra);
        if (*eval) return cmd_eval(ea);
        if (*exp) return cmd_export(g, xa);
        if (*imp) return cmd_import(g, ia);
        if (*edit) return cmd_edit(g, da, *edit);
        if (*anim) return cmd_animate(g, aa);
        if (*sim) return cmd_simulate(g, sa, *sim);
        if (*serve) return cmd_serve(va);
    } catch (const UsageError &e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
