#pragma once

// 2D MLS-MPM on the XZ plane. Particles are the triangle-soup vertices of a
// TwoD scene; after each frame their (x, z) positions are written back into
// the Gaussians.

#include "mirage/core.hpp"
#include "mirage/games.hpp"
#include "mirage/trainer.hpp"

#include <json.hpp>

#include <Eigen/SVD>

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace mirage {

enum class MaterialType { Elastic, Sand, Fluid };

inline const char *to_string(MaterialType t) {
    switch (t) {
    case MaterialType::Elastic: return "elastic";
    case MaterialType::Sand: return "sand";
    case MaterialType::Fluid: return "fluid";
    }
    return "?";
}

inline MaterialType material_from_string(const std::string &s) {
    if (s == "elastic") return MaterialType::Elastic;
    if (s == "sand") return MaterialType::Sand;
    if (s == "fluid") return MaterialType::Fluid;
    throw ValidationError("physics: unknown material '" + s + "' (expected elastic, sand or fluid)");
}

struct MaterialParams {
    double youngs_modulus = 1e4;
    double poisson_ratio = 0.3;
    double density = 1.0;
    MaterialType type = MaterialType::Elastic;
    Vec2 gravity = Vec2(0.0, -9.8);
    double dt = 1e-5;

    double mu() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }
    double lambda() const {
        return youngs_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
    }

    /// Largest substep the CFL-style bound allows on cells of size dx.
    double max_dt(double dx) const { return dx / (10.0 * std::sqrt(youngs_modulus / density)); }

    void validate(double dx) const {
        if (!(youngs_modulus > 0)) throw ValidationError("physics: youngs_modulus must be > 0");
        if (!(poisson_ratio >= 0 && poisson_ratio < 0.5))
            throw ValidationError("physics: poisson_ratio must lie in [0, 0.5)");
        if (!(density > 0)) throw ValidationError("physics: density must be > 0");
        if (!gravity.allFinite()) throw ValidationError("physics: gravity must be finite");
        if (!(dt > 0)) throw ValidationError("physics: dt must be > 0");
        if (dt > max_dt(dx) * (1.0 + 1e-12)) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "physics: dt %.3g exceeds the stability bound %.3g for cell size %.3g", dt,
                          max_dt(dx), dx);
            throw ValidationError(buf);
        }
        if (type != MaterialType::Elastic)
            throw ValidationError(std::string("physics: material '") + to_string(type) + "' is unimplemented");
    }
};

struct Particle {
    Vec2 x = Vec2::Zero(); // (x, z) on the plane
    Vec2 v = Vec2::Zero();
    Mat2 F = Mat2::Identity();
    Mat2 C = Mat2::Zero();
    double mass = 1.0;
    double volume = 1.0;
};

struct MpmGrid {
    int nx = 128, ny = 128;
    double dx = 1.0 / 128;
    Vec2 origin = Vec2::Zero();
    bool boundary = true; // sticky walls and floor
    int bound = 1;

    std::vector<Vec2> momentum; // velocity after grid_update
    std::vector<double> mass;
    std::vector<int> active; // touched nodes in first-touch order
    std::vector<char> touched;

    MpmGrid() = default;
    MpmGrid(int resolution, double cell, Vec2 lo, bool walls = true) : MpmGrid(resolution, resolution, cell, lo, walls) {}

    MpmGrid(int cols, int rows, double cell, Vec2 lo, bool walls = true)
        : nx(cols), ny(rows), dx(cell), origin(lo), boundary(walls) {
        if (nx < 4 || ny < 4) throw ValidationError("physics: grid resolution must be >= 4");
        if (!(dx > 0)) throw ValidationError("physics: cell size must be > 0");
        const std::size_t nodes = static_cast<std::size_t>(nx) * ny;
        momentum.assign(nodes, Vec2::Zero());
        mass.assign(nodes, 0.0);
        touched.assign(nodes, 0);
    }

    int index(int i, int j) const { return j * nx + i; }
    Vec2 node_position(int i, int j) const { return origin + dx * Vec2(i, j); }
    Vec2 upper() const { return origin + dx * Vec2(nx - 1, ny - 1); }
    bool is_boundary(int i, int j) const { return i < bound || j < bound || i > nx - 1 - bound || j > ny - 1 - bound; }

    double total_mass() const {
        double m = 0.0;
        for (int k : active) m += mass[k];
        return m;
    }

    void clear() {
        for (int k : active) {
            mass[k] = 0.0;
            momentum[k] = Vec2::Zero();
            touched[k] = 0;
        }
        active.clear();
    }
};

/// Grid over the visible plane: square cells, two padding cells past the
/// image on the floor side and around the longer axis.
inline MpmGrid grid_for(const CameraRig &rig, int resolution = 128) {
    const PlaneExtents e = plane_extents(rig);
    if (resolution < 8) throw ValidationError("physics: grid resolution must be >= 8");
    const double dx = 2.0 * std::max(e.dev_x, e.dev_z) / (resolution - 4);
    const Vec2 origin(-0.5 * resolution * dx, -e.dev_z - 2.0 * dx);
    return MpmGrid(resolution, dx, origin);
}

/// Same cells as `grid`, grown by whole cells until every point sits at
/// least two cells inside.
inline MpmGrid grid_covering(const MpmGrid &grid, const std::vector<Vec2> &points) {
    Vec2 lo = grid.origin, hi = grid.upper();
    for (const Vec2 &p : points) {
        lo = lo.cwiseMin(p - Vec2::Constant(2.0 * grid.dx));
        hi = hi.cwiseMax(p + Vec2::Constant(2.0 * grid.dx));
    }
    const Vec2 grow_lo = ((grid.origin - lo) / grid.dx).array().ceil();
    const Vec2 grow_hi = ((hi - grid.upper()) / grid.dx).array().ceil();
    const Vec2 origin = grid.origin - grid.dx * grow_lo;
    return MpmGrid(grid.nx + static_cast<int>(grow_lo.x() + grow_hi.x()), grid.ny + static_cast<int>(grow_lo.y() + grow_hi.y()),
                   grid.dx, origin, grid.boundary);
}

namespace detail {

struct Stencil {
    int base_i, base_j;
    Vec2 fx;
    double w[3][2];
};

inline bool make_stencil(const MpmGrid &grid, const Vec2 &x, Stencil &s) {
    const Vec2 g = (x - grid.origin) / grid.dx;
    s.base_i = static_cast<int>(std::floor(g.x() - 0.5));
    s.base_j = static_cast<int>(std::floor(g.y() - 0.5));
    if (!(s.base_i >= 0 && s.base_j >= 0 && s.base_i + 2 < grid.nx && s.base_j + 2 < grid.ny)) return false;
    s.fx = g - Vec2(s.base_i, s.base_j);
    for (int a = 0; a < 2; ++a) {
        const double f = s.fx[a];
        s.w[0][a] = 0.5 * (1.5 - f) * (1.5 - f);
        s.w[1][a] = 0.75 - (f - 1.0) * (f - 1.0);
        s.w[2][a] = 0.5 * (f - 0.5) * (f - 0.5);
    }
    return true;
}

/// SVD with a proper-rotation U and V; the last singular value carries the
/// sign of det F.
inline void signed_svd(const Mat2 &F, Mat2 &U, Vec2 &sig, Mat2 &V) {
    Eigen::JacobiSVD<Mat2> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    U = svd.matrixU();
    V = svd.matrixV();
    sig = svd.singularValues();
    if (U.determinant() < 0) {
        U.col(1) *= -1.0;
        sig[1] *= -1.0;
    }
    if (V.determinant() < 0) {
        V.col(1) *= -1.0;
        sig[1] *= -1.0;
    }
}

inline void clamp_determinant(Mat2 &F) {
    const double J = F.determinant();
    if (J >= 0.1 && J <= 10.0) return;
    Mat2 U, V;
    Vec2 sig;
    signed_svd(F, U, sig, V);
    sig[1] = std::max(sig[1], 1e-6);
    const double prod = sig[0] * sig[1];
    const double target = std::clamp(prod, 0.1, 10.0);
    sig *= std::sqrt(target / prod);
    F = U * sig.asDiagonal() * V.transpose();
}

/// Kirchhoff stress P F^T of the fixed-corotated energy.
inline Mat2 corotated_kirchhoff(const Mat2 &F, double mu, double lambda) {
    if (F == Mat2::Identity()) return Mat2::Zero();
    const double J = F.determinant();
    Mat2 U, V;
    Vec2 sig;
    signed_svd(F, U, sig, V);
    const Mat2 R = U * V.transpose();
    return 2.0 * mu * (F - R) * F.transpose() + lambda * (J - 1.0) * J * Mat2::Identity();
}

inline bool particle_finite(const Particle &p) {
    return p.x.allFinite() && p.v.allFinite() && p.F.allFinite() && p.C.allFinite();
}

} // namespace detail

/// Particle-to-grid transfer with the MLS force term.
inline void scatter(const std::vector<Particle> &particles, MpmGrid &grid, const MaterialParams &mat) {
    grid.clear();
    const double inv_dx = 1.0 / grid.dx;
    const double mu = mat.mu(), lambda = mat.lambda();
    for (std::size_t p = 0; p < particles.size(); ++p) {
        const Particle &q = particles[p];
        if (!detail::particle_finite(q))
            throw Error("physics: particle " + std::to_string(p) + " has a non-finite state");
        detail::Stencil s;
        if (!detail::make_stencil(grid, q.x, s))
            throw ValidationError("physics: particle " + std::to_string(p) + " left the grid");
        const Mat2 stress = -mat.dt * q.volume * 4.0 * inv_dx * inv_dx * detail::corotated_kirchhoff(q.F, mu, lambda);
        const Mat2 affine = stress + q.mass * q.C;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                const Vec2 dpos = (Vec2(a, b) - s.fx) * grid.dx;
                const double w = s.w[a][0] * s.w[b][1];
                const int k = grid.index(s.base_i + a, s.base_j + b);
                if (!grid.touched[k]) {
                    grid.touched[k] = 1;
                    grid.active.push_back(k);
                }
                grid.momentum[k] += w * (q.mass * q.v + affine * dpos);
                grid.mass[k] += w * q.mass;
            }
    }
}

/// Momentum to velocity, gravity, sticky boundary.
inline void grid_update(MpmGrid &grid, const MaterialParams &mat) {
    for (int k : grid.active) {
        if (grid.mass[k] <= 0.0) {
            grid.momentum[k] = Vec2::Zero();
            continue;
        }
        Vec2 v = grid.momentum[k] / grid.mass[k] + mat.dt * mat.gravity;
        if (grid.boundary && grid.is_boundary(k % grid.nx, k / grid.nx)) v = Vec2::Zero();
        grid.momentum[k] = v;
    }
}

/// Grid-to-particle transfer, F update and advection.
inline void gather(std::vector<Particle> &particles, const MpmGrid &grid, const MaterialParams &mat) {
    const double inv_dx = 1.0 / grid.dx;
    const Vec2 lo = Vec2::Constant(0.5 * grid.dx);
    const Vec2 hi = grid.dx * (Vec2(grid.nx, grid.ny) - Vec2::Constant(1.5 + 1e-9));
    for (std::size_t p = 0; p < particles.size(); ++p) {
        Particle &q = particles[p];
        detail::Stencil s;
        if (!detail::make_stencil(grid, q.x, s))
            throw ValidationError("physics: particle " + std::to_string(p) + " left the grid");
        Vec2 v = Vec2::Zero();
        Mat2 C = Mat2::Zero();
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                const Vec2 dpos = Vec2(a, b) - s.fx;
                const double w = s.w[a][0] * s.w[b][1];
                const Vec2 &gv = grid.momentum[grid.index(s.base_i + a, s.base_j + b)];
                v += w * gv;
                C += 4.0 * inv_dx * w * gv * dpos.transpose();
            }
        q.v = v;
        q.C = C;
        q.F = (Mat2::Identity() + mat.dt * C) * q.F;
        detail::clamp_determinant(q.F);
        q.x += mat.dt * v;
        if (grid.boundary) {
            Vec2 local = q.x - grid.origin;
            local = local.cwiseMax(lo).cwiseMin(hi);
            q.x = grid.origin + local;
        }
    }
}

inline void mpm_step(std::vector<Particle> &particles, MpmGrid &grid, const MaterialParams &mat) {
    mat.validate(grid.dx);
    scatter(particles, grid, mat);
    grid_update(grid, mat);
    gather(particles, grid, mat);
    for (std::size_t p = 0; p < particles.size(); ++p)
        if (!detail::particle_finite(particles[p]))
            throw Error("physics: particle " + std::to_string(p) + " has a non-finite state");
}

inline Vec2 total_momentum(const std::vector<Particle> &particles) {
    Vec2 m = Vec2::Zero();
    for (const Particle &p : particles) m += p.mass * p.v;
    return m;
}

inline double total_mass(const std::vector<Particle> &particles) {
    double m = 0.0;
    for (const Particle &p : particles) m += p.mass;
    return m;
}

/// Axis-aligned block of particles on a regular lattice.
inline std::vector<Particle> block_particles(const Vec2 &lo, const Vec2 &hi, double spacing, const MaterialParams &mat) {
    if (!(spacing > 0)) throw ValidationError("physics: spacing must be > 0");
    std::vector<Particle> out;
    const int nx = std::max(1, static_cast<int>(std::round((hi.x() - lo.x()) / spacing)));
    const int nz = std::max(1, static_cast<int>(std::round((hi.y() - lo.y()) / spacing)));
    for (int j = 0; j < nz; ++j)
        for (int i = 0; i < nx; ++i) {
            Particle p;
            p.x = lo + spacing * Vec2(i + 0.5, j + 0.5);
            p.volume = spacing * spacing;
            p.mass = mat.density * p.volume;
            out.push_back(p);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Scene coupling

struct ParticleBinding {
    std::size_t gaussian;
    int vertex;
};

struct Coupling {
    std::vector<Particle> particles;
    std::vector<ParticleBinding> binding;
    MpmGrid grid;
};

/// Three particles per triangle, uniform mass. Each particle gets the
/// volume of a quarter cell. The grid grows past the camera extents when
/// vertices lie outside them.
inline Coupling couple_init(const Scene &scene, const MaterialParams &mat, int grid_resolution = 128) {
    if (scene.mode != Mode::TwoD)
        throw ValidationError(std::string("physics: simulation needs a 2d scene (got ") + std::string(to_string(scene.mode)) +
                              "); retrain or convert it in 2d mode");
    if (!scene.rig) throw ValidationError("physics: scene has no camera rig; the grid is laid over its plane");
    Coupling c;
    const MpmGrid base = grid_for(*scene.rig, grid_resolution);
    const double volume = 0.25 * base.dx * base.dx;
    c.particles.reserve(3 * scene.size());
    c.binding.reserve(3 * scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const FaceRep f = face_of(scene, i);
        for (int k = 0; k < 3; ++k) {
            Particle p;
            p.x = Vec2(f.v[k].x(), f.v[k].z());
            p.volume = volume;
            p.mass = mat.density * volume;
            c.particles.push_back(p);
            c.binding.push_back({i, k});
        }
    }
    std::vector<Vec2> points(c.particles.size());
    for (std::size_t p = 0; p < points.size(); ++p) points[p] = c.particles[p].x;
    c.grid = grid_covering(base, points);
    return c;
}

/// Writes particle positions into the bound vertices. Triangles that would
/// collapse keep `previous`, which is updated to the faces actually used.
inline Scene write_back(const Scene &scene, const Coupling &c, std::vector<FaceRep> &previous) {
    Scene out = scene;
    std::vector<FaceRep> faces = previous;
    for (std::size_t p = 0; p < c.particles.size(); ++p) {
        const ParticleBinding &b = c.binding[p];
        faces[b.gaussian].v[b.vertex] = Vec3(c.particles[p].x.x(), 0.0, c.particles[p].x.y());
    }
    for (std::size_t i = 0; i < faces.size(); ++i) {
        const FaceRep &f = faces[i];
        if ((f.v[1] - f.v[0]).cross(f.v[2] - f.v[0]).norm() < 1e-10 || (f.v[1] - f.v[0]).norm() <= 1e-12) continue;
        previous[i] = f;
    }
    for (std::size_t i = 0; i < out.size(); ++i) assign_face(out, i, previous[i]);
    return out;
}

struct SimulateOptions {
    std::size_t frames = 30;
    std::size_t substeps = 20;
    int grid_resolution = 128;
    std::size_t trajectory_samples = 0;
    std::uint64_t seed = 0;
};

struct TrajectoryRow {
    std::size_t frame;
    std::size_t particle;
    double x, z;
};

/// Runs the simulation and returns one scene per frame. `on_frame` may
/// return false to stop early.
inline std::vector<Scene> simulate(const Scene &scene, const MaterialParams &mat, const SimulateOptions &opt = {},
                                   std::vector<TrajectoryRow> *trajectory = nullptr,
                                   const std::function<bool(std::size_t, const Scene &)> &on_frame = {}) {
    if (opt.substeps == 0) throw ValidationError("physics: substeps must be >= 1");
    Coupling c = couple_init(scene, mat, opt.grid_resolution);
    mat.validate(c.grid.dx);
    std::vector<FaceRep> previous(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) previous[i] = face_of(scene, i);

    std::vector<std::size_t> sampled;
    if (trajectory && !c.particles.empty()) {
        std::mt19937_64 rng(opt.seed);
        std::vector<std::size_t> all(c.particles.size());
        for (std::size_t p = 0; p < all.size(); ++p) all[p] = p;
        std::shuffle(all.begin(), all.end(), rng);
        sampled.assign(all.begin(), all.begin() + std::min(opt.trajectory_samples, all.size()));
        std::sort(sampled.begin(), sampled.end());
    }

    std::vector<Scene> frames;
    frames.reserve(opt.frames);
    for (std::size_t f = 0; f < opt.frames; ++f) {
        for (std::size_t s = 0; s < opt.substeps; ++s) mpm_step(c.particles, c.grid, mat);
        frames.push_back(write_back(scene, c, previous));
        if (trajectory)
            for (std::size_t p : sampled) trajectory->push_back({f, p, c.particles[p].x.x(), c.particles[p].x.y()});
        if (on_frame && !on_frame(f, frames.back())) break;
    }
    return frames;
}

inline std::string trajectory_csv(const std::vector<TrajectoryRow> &rows) {
    std::string out = "frame,particle,x,z\n";
    char buf[96];
    for (const TrajectoryRow &r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g\n", r.frame, r.particle, r.x, r.z);
        out += buf;
    }
    return out;
}

/// Reads the "physics" block of a config file.
inline void apply_physics_json(MaterialParams &mat, SimulateOptions &opt, const nlohmann::json &j) {
    auto num = [&](const char *key, auto &dst) {
        if (auto it = j.find(key); it != j.end()) {
            if (!it->is_number()) throw ParseError(std::string("physics.") + key + ": expected a number");
            dst = it->get<std::decay_t<decltype(dst)>>();
        }
    };
    num("youngs_modulus", mat.youngs_modulus);
    num("poisson_ratio", mat.poisson_ratio);
    num("density", mat.density);
    num("dt", mat.dt);
    num("frames", opt.frames);
    num("substeps", opt.substeps);
    num("grid_resolution", opt.grid_resolution);
    num("trajectory_samples", opt.trajectory_samples);
    num("seed", opt.seed);
    if (auto it = j.find("material"); it != j.end()) {
        if (!it->is_string()) throw ParseError("physics.material: expected a string");
        mat.type = material_from_string(it->get<std::string>());
    }
    if (auto it = j.find("gravity"); it != j.end()) {
        if (!it->is_array() || it->size() != 2 || !(*it)[0].is_number() || !(*it)[1].is_number())
            throw ParseError("physics.gravity: expected 2 numbers");
        mat.gravity = Vec2((*it)[0].get<double>(), (*it)[1].get<double>());
    }
}

} // namespace mirage
