#pragma once

// Triangle-soup mesh round trip, selections, deformers and keyframe
// animation. Every operation returns a new scene; the input is untouched.

#include "mirage/camera.hpp"
#include "mirage/core.hpp"
#include "mirage/games.hpp"
#include "mirage/io.hpp"
#include "mirage/rasterizer.hpp"

#include <json.hpp>

#include <Eigen/SVD>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace mirage {

// ---------------------------------------------------------------------------
// Mesh files

enum class MeshFormat { Obj, Ply };

inline MeshFormat mesh_format_for(const std::filesystem::path &path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".obj") return MeshFormat::Obj;
    if (ext == ".ply") return MeshFormat::Ply;
    throw ValidationError("mesh: unsupported extension '" + ext + "' (expected .obj or .ply)");
}

/// mesh.obj -> mesh.faces.json
inline std::filesystem::path sidecar_path(const std::filesystem::path &mesh) {
    std::filesystem::path p = mesh;
    p.replace_extension(".faces.json");
    return p;
}

namespace detail {

inline std::string format_vertex(const Vec3 &v) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.10g %.10g %.10g", v.x(), v.y(), v.z());
    return buf;
}

inline std::string encode_obj(const TriangleSoup &soup) {
    std::ostringstream out;
    out << "# triangle soup: " << soup.size() << " faces, face i uses vertices 3i+1..3i+3\n";
    for (const FaceRep &f : soup.triangles)
        for (const Vec3 &v : f.v) out << "v " << format_vertex(v) << '\n';
    for (std::size_t i = 0; i < soup.size(); ++i)
        out << "f " << 3 * i + 1 << ' ' << 3 * i + 2 << ' ' << 3 * i + 3 << '\n';
    return out.str();
}

inline std::string encode_ply(const TriangleSoup &soup) {
    std::ostringstream out;
    out << "ply\nformat ascii 1.0\n"
        << "element vertex " << 3 * soup.size() << "\nproperty double x\nproperty double y\nproperty double z\n"
        << "element face " << soup.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
    for (const FaceRep &f : soup.triangles)
        for (const Vec3 &v : f.v) out << format_vertex(v) << '\n';
    for (std::size_t i = 0; i < soup.size(); ++i) out << "3 " << 3 * i << ' ' << 3 * i + 1 << ' ' << 3 * i + 2 << '\n';
    return out.str();
}

inline long parse_obj_index(const std::string &token, std::size_t vertex_count, std::size_t line) {
    const std::string head = token.substr(0, token.find('/'));
    long idx = 0;
    try {
        std::size_t used = 0;
        idx = std::stol(head, &used);
        if (used != head.size()) throw std::invalid_argument(head);
    } catch (const std::exception &) {
        throw ParseError("obj line " + std::to_string(line) + ": bad vertex index '" + token + "'");
    }
    if (idx < 0) idx += static_cast<long>(vertex_count) + 1;
    if (idx < 1 || idx > static_cast<long>(vertex_count))
        throw ParseError("obj line " + std::to_string(line) + ": vertex index " + head + " out of range");
    return idx - 1;
}

inline std::vector<FaceRep> decode_obj(const std::string &text) {
    std::vector<Vec3> verts;
    std::vector<FaceRep> faces;
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::istringstream ls(raw);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x() >> v.y() >> v.z()))
                throw ParseError("obj line " + std::to_string(line) + ": expected three vertex coordinates");
            verts.push_back(v);
        } else if (tag == "f") {
            std::vector<std::string> tok;
            for (std::string t; ls >> t;) tok.push_back(t);
            if (tok.size() != 3)
                throw ParseError("obj line " + std::to_string(line) + ": face " + std::to_string(faces.size()) +
                                 " has " + std::to_string(tok.size()) + " vertices (triangles only)");
            FaceRep f;
            for (int k = 0; k < 3; ++k) f.v[k] = verts[parse_obj_index(tok[k], verts.size(), line)];
            faces.push_back(f);
        }
    }
    return faces;
}

inline std::vector<FaceRep> decode_ply(const std::string &text) {
    std::istringstream in(text);
    std::string word, line;
    std::getline(in, line);
    if (line.rfind("ply", 0) != 0) throw ParseError("ply: missing magic");
    std::size_t nv = 0, nf = 0;
    bool ascii = false;
    std::string current;
    int vertex_props = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        ls >> word;
        if (word == "format") {
            std::string kind;
            ls >> kind;
            ascii = kind == "ascii";
        } else if (word == "element") {
            ls >> current;
            if (current == "vertex") ls >> nv;
            else if (current == "face") ls >> nf;
        } else if (word == "property" && current == "vertex") {
            ++vertex_props;
        } else if (word == "end_header") {
            break;
        }
    }
    if (!ascii) throw ParseError("ply: only ASCII PLY is supported");
    if (vertex_props < 3) throw ParseError("ply: vertices need x, y, z");
    std::vector<Vec3> verts(nv);
    for (std::size_t i = 0; i < nv; ++i) {
        if (!std::getline(in, line)) throw ParseError("ply: truncated vertex list");
        std::istringstream ls(line);
        if (!(ls >> verts[i].x() >> verts[i].y() >> verts[i].z()))
            throw ParseError("ply: vertex " + std::to_string(i) + ": expected three coordinates");
    }
    std::vector<FaceRep> faces(nf);
    for (std::size_t i = 0; i < nf; ++i) {
        if (!std::getline(in, line)) throw ParseError("ply: truncated face list");
        std::istringstream ls(line);
        std::size_t count = 0;
        ls >> count;
        if (count != 3) throw ParseError("ply: face " + std::to_string(i) + " is not a triangle");
        for (int k = 0; k < 3; ++k) {
            std::size_t idx = 0;
            if (!(ls >> idx) || idx >= nv) throw ParseError("ply: face " + std::to_string(i) + ": bad vertex index");
            faces[i].v[k] = verts[idx];
        }
    }
    return faces;
}

inline void write_file(const std::filesystem::path &path, const std::string &bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << bytes;
    if (!out) throw Error("failed writing " + path.string());
}

} // namespace detail

inline nlohmann::json sidecar_to_json(const Scene &scene) {
    nlohmann::json faces = nlohmann::json::array();
    for (const FlatGaussian &g : scene.gaussians)
        faces.push_back({{"opacity_logit", g.opacity_logit}, {"color", {g.color[0], g.color[1], g.color[2]}}});
    nlohmann::json j = {{"version", kSceneFormatVersion},
                        {"mode", std::string(to_string(scene.mode))},
                        {"background", {scene.background[0], scene.background[1], scene.background[2]}},
                        {"faces", std::move(faces)}};
    if (scene.rig) j["camera"] = rig_to_json(*scene.rig);
    return j;
}

/// Writes one disconnected triangle per Gaussian (OBJ or ASCII PLY by
/// extension) plus the per-face opacity/color sidecar.
inline void export_soup(const Scene &scene, const std::filesystem::path &path) {
    const TriangleSoup soup = soup_from_scene(scene);
    const MeshFormat fmt = mesh_format_for(path);
    detail::write_file(path, fmt == MeshFormat::Obj ? detail::encode_obj(soup) : detail::encode_ply(soup));
    detail::write_file(sidecar_path(path), sidecar_to_json(scene).dump(1) + "\n");
}

inline std::vector<FaceRep> read_mesh(const std::filesystem::path &path) {
    const MeshFormat format = mesh_format_for(path);
    const std::string text = read_text_file(path);
    return format == MeshFormat::Obj ? detail::decode_obj(text) : detail::decode_ply(text);
}

/// Rebuilds every Gaussian of `base` from the faces, in order. Applies the
/// sidecar colors/opacities when one sits next to the mesh.
inline Scene import_faces(const Scene &base, const std::vector<FaceRep> &faces, double plane_tol = 1e-6) {
    if (faces.size() != base.size())
        throw ValidationError("import: mesh has " + std::to_string(faces.size()) + " faces but the scene has " +
                              std::to_string(base.size()) + " Gaussians");
    Scene out = base;
    out.sync_mode_params();
    for (std::size_t i = 0; i < faces.size(); ++i) {
        try {
            assign_face(out, i, faces[i], plane_tol);
        } catch (const DegenerateTriangleError &) {
            throw DegenerateTriangleError(i, "import: face " + std::to_string(i) + " is degenerate");
        } catch (const ValidationError &e) {
            throw ValidationError(std::string("import: face ") + std::to_string(i) + ": " + e.what());
        }
    }
    return out;
}

inline void apply_sidecar(Scene &scene, const nlohmann::json &j) {
    using detail::field;
    const nlohmann::json &faces = field(j, "faces", "sidecar");
    if (!faces.is_array() || faces.size() != scene.size())
        throw ParseError("sidecar.faces: expected " + std::to_string(scene.size()) + " entries");
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const std::string p = "sidecar.faces[" + std::to_string(i) + "]";
        scene.gaussians[i].opacity_logit = detail::number(field(faces[i], "opacity_logit", p), p + ".opacity_logit");
        scene.gaussians[i].color = detail::fixed_vec<3>(field(faces[i], "color", p), p + ".color");
    }
}

inline Scene import_soup(const Scene &base, const std::filesystem::path &path) {
    Scene out = import_faces(base, read_mesh(path));
    const auto side = sidecar_path(path);
    if (std::filesystem::exists(side)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text_file(side));
        } catch (const nlohmann::json::parse_error &e) {
            throw ParseError(std::string("sidecar: invalid JSON: ") + e.what());
        }
        apply_sidecar(out, j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selections

struct Selection {
    std::vector<std::size_t> indices; // sorted, unique

    bool contains(std::size_t i) const { return std::binary_search(indices.begin(), indices.end(), i); }
    std::size_t size() const { return indices.size(); }
    bool empty() const { return indices.empty(); }
};

inline Selection select_all(const Scene &scene) {
    Selection s;
    s.indices.resize(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) s.indices[i] = i;
    return s;
}

inline Selection select_indices(const Scene &scene, std::vector<std::size_t> indices) {
    for (std::size_t i : indices)
        if (i >= scene.size())
            throw ValidationError("selection: index " + std::to_string(i) + " out of range (scene has " +
                                  std::to_string(scene.size()) + " Gaussians)");
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    return {std::move(indices)};
}

/// Gaussians whose mean (x, z) lies in the closed rectangle.
inline Selection select_rect(const Scene &scene, double x0, double z0, double x1, double z1) {
    if (!(x0 < x1 && z0 < z1)) throw ValidationError("select_rect: need x0 < x1 and z0 < z1");
    Selection s;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const Vec3 &m = scene.gaussians[i].mean;
        if (m.x() >= x0 && m.x() <= x1 && m.z() >= z0 && m.z() <= z1) s.indices.push_back(i);
    }
    return s;
}

/// Even-odd point-in-polygon on the (x, z) coordinates of the means.
inline Selection select_polygon(const Scene &scene, const std::vector<Vec2> &poly) {
    if (poly.size() < 3) throw ValidationError("select_polygon: need at least 3 vertices");
    Selection s;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const double px = scene.gaussians[i].mean.x(), pz = scene.gaussians[i].mean.z();
        bool inside = false;
        for (std::size_t a = 0, b = poly.size() - 1; a < poly.size(); b = a++) {
            const Vec2 &pa = poly[a], &pb = poly[b];
            if ((pa.y() > pz) != (pb.y() > pz) && px < (pb.x() - pa.x()) * (pz - pa.y()) / (pb.y() - pa.y()) + pa.x())
                inside = !inside;
        }
        if (inside) s.indices.push_back(i);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Deformers

struct EditOptions {
    /// Leave a background-colored copy of each selected Gaussian at its old
    /// place, appended last so it composites behind coplanar neighbours.
    bool fill_vacated = false;
};

inline Vec3 transform_point(const Mat4 &m, const Vec3 &p) { return m.topLeftCorner<3, 3>() * p + m.topRightCorner<3, 1>(); }

namespace detail {

inline void append_fill(Scene &out, const Scene &before, const Selection &sel) {
    for (std::size_t i : sel.indices) {
        FlatGaussian g = before.gaussians[i];
        g.color = before.background;
        out.gaussians.push_back(g);
        if (!out.phi.empty()) out.phi.push_back(before.phi[i]);
        if (!out.gamma.empty()) out.gamma.push_back(before.gamma[i]);
    }
}

} // namespace detail

/// Same as exporting, moving the selected triangles' vertices through
/// `fn`, and importing; unselected Gaussians are copied untouched.
template <class VertexFn>
Scene deform_vertices(const Scene &scene, const Selection &sel, VertexFn &&fn, const EditOptions &opts = {}) {
    Scene out = scene;
    out.sync_mode_params();
    for (std::size_t i : sel.indices) {
        if (i >= scene.size()) throw ValidationError("selection index " + std::to_string(i) + " out of range");
        FaceRep f = face_of(scene, i);
        for (int k = 0; k < 3; ++k) f.v[k] = fn(f.v[k], i, k);
        assign_face(out, i, f);
    }
    if (opts.fill_vacated) detail::append_fill(out, scene, sel);
    return out;
}

inline Scene apply_affine(const Scene &scene, const Selection &sel, const Mat4 &m, const EditOptions &opts = {}) {
    const double det = m.topLeftCorner<3, 3>().determinant();
    if (!(std::abs(det) > 1e-12)) throw ValidationError("apply_affine: singular linear part (det " + std::to_string(det) + ")");
    return deform_vertices(scene, sel, [&](const Vec3 &v, std::size_t, int) { return transform_point(m, v); }, opts);
}

/// Rolls the XZ plane onto a cylinder whose axis is parallel to `axis`
/// (Z when true, X otherwise), touching the plane along coordinate
/// `center`. Positive radius bends away from the primary camera.
inline Scene bend(const Scene &scene, const Selection &sel, double radius, double center = 0.0, bool axis_z = true,
                  const EditOptions &opts = {}) {
    if (!(std::abs(radius) > 1e-12)) throw ValidationError("bend: radius must be non-zero");
    return deform_vertices(
        scene, sel,
        [&](const Vec3 &v, std::size_t, int) {
            const double u = (axis_z ? v.x() : v.z()) - center;
            const double theta = u / radius;
            Vec3 p = v;
            const double along = center + (radius - v.y()) * std::sin(theta);
            p.y() = radius - (radius - v.y()) * std::cos(theta);
            (axis_z ? p.x() : p.z()) = along;
            return p;
        },
        opts);
}

/// Per-vertex displacement for the listed Gaussians (3 vectors each).
inline Scene displace(const Scene &scene, const std::map<std::size_t, std::array<Vec3, 3>> &moves,
                      const EditOptions &opts = {}) {
    std::vector<std::size_t> idx;
    for (const auto &[i, d] : moves) idx.push_back(i);
    const Selection sel = select_indices(scene, idx);
    return deform_vertices(scene, sel, [&](const Vec3 &v, std::size_t i, int k) { return v + moves.at(i)[k]; }, opts);
}

/// Pixel mask of the rasterizer support (3 sigma boxes) of the selected
/// Gaussians; pixels outside it receive no contribution from them.
inline std::vector<bool> footprint_mask(const Scene &scene, const Selection &sel, const Camera &cam) {
    std::vector<bool> mask(static_cast<std::size_t>(cam.width) * cam.height, false);
    for (std::size_t i : sel.indices) {
        const auto p = project(scene.gaussians.at(i), cam);
        if (!p) continue;
        for (int y = p->y0; y <= p->y1; ++y)
            for (int x = p->x0; x <= p->x1; ++x) mask[static_cast<std::size_t>(y) * cam.width + x] = true;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Keyframe animation

/// translation * rotation * stretch, with stretch symmetric (a plain scale
/// in the common case).
struct TrsTransform {
    Vec3 translation = Vec3::Zero();
    Quat rotation = quat_identity();
    Mat3 stretch = Mat3::Identity();

    Mat4 matrix() const {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = rotation_from_quat(rotation) * stretch;
        m.topRightCorner<3, 1>() = translation;
        return m;
    }
};

/// Polar decomposition of the linear part: A = R S with R proper.
inline TrsTransform decompose(const Mat4 &m) {
    const Mat3 a = m.topLeftCorner<3, 3>();
    if (!(std::abs(a.determinant()) > 1e-12)) throw ValidationError("keyframe matrix: singular linear part");
    Eigen::JacobiSVD<Mat3> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    Vec3 sigma = svd.singularValues();
    if ((u * v.transpose()).determinant() < 0) {
        u.col(2) *= -1.0;
        sigma[2] *= -1.0;
    }
    TrsTransform t;
    t.translation = m.topRightCorner<3, 1>();
    t.rotation = quat_from_rotation(u * v.transpose());
    t.stretch = v * sigma.asDiagonal() * v.transpose();
    return t;
}

inline Quat slerp(const Quat &a, Quat b, double t) {
    double d = a.dot(b);
    if (d < 0) {
        b = -b;
        d = -d;
    }
    if (d > 1.0 - 1e-12) return ((1 - t) * a + t * b).normalized();
    const double theta = std::acos(std::clamp(d, -1.0, 1.0));
    return (std::sin((1 - t) * theta) * a + std::sin(t * theta) * b) / std::sin(theta);
}

struct Keyframe {
    double time = 0.0;
    TrsTransform transform;
    /// Optional per-vertex offsets keyed by Gaussian index, added after
    /// the transform and interpolated linearly.
    std::map<std::size_t, std::array<Vec3, 3>> displacements;
};

struct Track {
    Selection selection;
    Vec3 pivot = Vec3::Zero();
    std::vector<Keyframe> keys;

    void validate(std::size_t scene_size) const {
        if (keys.size() < 2) throw ValidationError("track: need at least 2 keyframes");
        for (std::size_t k = 1; k < keys.size(); ++k)
            if (!(keys[k].time > keys[k - 1].time))
                throw ValidationError("track: keyframe times must be strictly increasing (key " + std::to_string(k) +
                                      ")");
        for (std::size_t i : selection.indices)
            if (i >= scene_size) throw ValidationError("track: selection index " + std::to_string(i) + " out of range");
    }
};

/// Transform and displacements of a track at time t (clamped to the key range).
inline Keyframe sample_track(const Track &track, double t) {
    const auto &keys = track.keys;
    if (t <= keys.front().time) return keys.front();
    if (t >= keys.back().time) return keys.back();
    std::size_t k = 1;
    while (keys[k].time < t) ++k;
    const Keyframe &a = keys[k - 1], &b = keys[k];
    const double u = (t - a.time) / (b.time - a.time);
    Keyframe out;
    out.time = t;
    out.transform.translation = (1 - u) * a.transform.translation + u * b.transform.translation;
    out.transform.rotation = slerp(a.transform.rotation, b.transform.rotation, u);
    out.transform.stretch = (1 - u) * a.transform.stretch + u * b.transform.stretch;
    std::map<std::size_t, std::array<Vec3, 3>> disp = a.displacements;
    for (auto &[i, d] : disp)
        for (Vec3 &v : d) v *= (1 - u);
    for (const auto &[i, d] : b.displacements) {
        auto &slot = disp.try_emplace(i, std::array<Vec3, 3>{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()}).first->second;
        for (int c = 0; c < 3; ++c) slot[c] += u * d[c];
    }
    out.displacements = std::move(disp);
    return out;
}

/// Scene at time t with every track applied in order.
inline Scene pose_at(const Scene &scene, const std::vector<Track> &tracks, double t) {
    Scene out = scene;
    for (const Track &track : tracks) {
        const Keyframe key = sample_track(track, t);
        Mat4 about = Mat4::Identity();
        about.topRightCorner<3, 1>() = track.pivot;
        Mat4 back = Mat4::Identity();
        back.topRightCorner<3, 1>() = -track.pivot;
        const Mat4 m = about * key.transform.matrix() * back;
        const std::array<Vec3, 3> zero{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
        out = deform_vertices(out, track.selection, [&](const Vec3 &v, std::size_t i, int k) {
            auto it = key.displacements.find(i);
            return transform_point(m, v) + (it == key.displacements.end() ? zero : it->second)[k];
        });
    }
    return out;
}

/// Frame k of F samples t = k / (F - 1).
inline double frame_time(int k, int frames) { return frames <= 1 ? 0.0 : static_cast<double>(k) / (frames - 1); }

inline std::vector<Scene> animate_scenes(const Scene &scene, const std::vector<Track> &tracks, int frames) {
    if (frames < 1) throw ValidationError("animate: frame count must be >= 1");
    for (const Track &t : tracks) t.validate(scene.size());
    std::vector<Scene> out;
    out.reserve(frames);
    for (int k = 0; k < frames; ++k) out.push_back(pose_at(scene, tracks, frame_time(k, frames)));
    return out;
}

inline std::vector<ImageBuffer> animate(const Scene &scene, const std::vector<Track> &tracks, int frames,
                                        const Camera &cam) {
    std::vector<ImageBuffer> images;
    for (const Scene &s : animate_scenes(scene, tracks, frames)) images.push_back(render(s, cam, s.background));
    return images;
}

/// dir/out_0000.png, dir/out_0001.png, ...
inline std::vector<std::filesystem::path> write_frames(const std::vector<ImageBuffer> &frames,
                                                       const std::filesystem::path &dir,
                                                       const std::string &prefix = "out_") {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> paths;
    for (std::size_t k = 0; k < frames.size(); ++k) {
        char name[64];
        std::snprintf(name, sizeof name, "%s%04zu.png", prefix.c_str(), k);
        paths.push_back(dir / name);
        image_save(frames[k], paths.back());
    }
    return paths;
}

// ---------------------------------------------------------------------------
// Keyframe track JSON
//
// [{"selection": {"all": true} | {"indices": [...]} | {"rect": [x0, z0, x1, z1]}
//                 | {"polygon": [[x, z], ...]},
//   "pivot": [x, y, z],
//   "keys": [{"time": 0, "translation": [..], "rotation": {"axis": [..], "angle": a}
//             | "quat": [w, x, y, z], "scale": s | [sx, sy, sz], "matrix": [16, row-major],
//             "displacements": {"<index>": [[dx, dy, dz] x 3]}}]}]

inline Selection selection_from_json(const Scene &scene, const nlohmann::json &j, const std::string &path) {
    if (!j.is_object()) throw ParseError(path + ": expected an object");
    if (j.contains("all")) return select_all(scene);
    if (auto it = j.find("indices"); it != j.end()) {
        if (!it->is_array()) throw ParseError(path + ".indices: expected an array");
        std::vector<std::size_t> idx;
        for (const auto &v : *it) {
            if (!v.is_number_unsigned()) throw ParseError(path + ".indices: expected non-negative integers");
            idx.push_back(v.get<std::size_t>());
        }
        return select_indices(scene, idx);
    }
    if (auto it = j.find("rect"); it != j.end()) {
        const Vec4 r = detail::fixed_vec<4>(*it, path + ".rect");
        return select_rect(scene, r[0], r[1], r[2], r[3]);
    }
    if (auto it = j.find("polygon"); it != j.end()) {
        if (!it->is_array()) throw ParseError(path + ".polygon: expected an array");
        std::vector<Vec2> poly;
        for (std::size_t k = 0; k < it->size(); ++k)
            poly.push_back(detail::fixed_vec<2>((*it)[k], path + ".polygon[" + std::to_string(k) + "]"));
        return select_polygon(scene, poly);
    }
    throw ParseError(path + ": expected one of all, indices, rect, polygon");
}

inline Keyframe keyframe_from_json(const nlohmann::json &j, const std::string &path) {
    using namespace detail;
    Keyframe k;
    k.time = number(field(j, "time", path), path + ".time");
    if (auto it = j.find("matrix"); it != j.end()) {
        if (!it->is_array() || it->size() != 16) throw ParseError(path + ".matrix: expected 16 numbers");
        Mat4 m;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) m(r, c) = number((*it)[4 * r + c], path + ".matrix");
        k.transform = decompose(m);
    }
    if (auto it = j.find("translation"); it != j.end()) k.transform.translation = fixed_vec<3>(*it, path + ".translation");
    if (auto it = j.find("quat"); it != j.end()) k.transform.rotation = fixed_vec<4>(*it, path + ".quat").normalized();
    if (auto it = j.find("rotation"); it != j.end()) {
        const Vec3 axis = fixed_vec<3>(field(*it, "axis", path + ".rotation"), path + ".rotation.axis");
        const double angle = number(field(*it, "angle", path + ".rotation"), path + ".rotation.angle");
        if (!(axis.norm() > 1e-12)) throw ParseError(path + ".rotation.axis: zero axis");
        const Vec3 a = axis.normalized() * std::sin(angle / 2);
        k.transform.rotation = Quat(std::cos(angle / 2), a.x(), a.y(), a.z());
    }
    if (auto it = j.find("scale"); it != j.end()) {
        if (it->is_number()) k.transform.stretch = Mat3::Identity() * it->get<double>();
        else k.transform.stretch = fixed_vec<3>(*it, path + ".scale").asDiagonal();
    }
    if (auto it = j.find("displacements"); it != j.end()) {
        if (!it->is_object()) throw ParseError(path + ".displacements: expected an object");
        for (const auto &[key, val] : it->items()) {
            const std::string p = path + ".displacements." + key;
            std::size_t idx = 0;
            try {
                idx = std::stoul(key);
            } catch (const std::exception &) {
                throw ParseError(p + ": key must be a Gaussian index");
            }
            if (!val.is_array() || val.size() != 3) throw ParseError(p + ": expected 3 vectors");
            std::array<Vec3, 3> d;
            for (int c = 0; c < 3; ++c) d[c] = fixed_vec<3>(val[c], p + "[" + std::to_string(c) + "]");
            k.displacements[idx] = d;
        }
    }
    return k;
}

inline std::vector<Track> tracks_from_json(const Scene &scene, const nlohmann::json &j) {
    const nlohmann::json &arr = j.is_object() && j.contains("tracks") ? j.at("tracks") : j;
    if (!arr.is_array()) throw ParseError("tracks: expected an array");
    std::vector<Track> tracks;
    for (std::size_t t = 0; t < arr.size(); ++t) {
        const std::string p = "tracks[" + std::to_string(t) + "]";
        Track track;
        const nlohmann::json &e = arr[t];
        track.selection = e.contains("selection") ? selection_from_json(scene, e.at("selection"), p + ".selection")
                                                  : select_all(scene);
        if (auto it = e.find("pivot"); it != e.end()) track.pivot = detail::fixed_vec<3>(*it, p + ".pivot");
        const nlohmann::json &keys = detail::field(e, "keys", p);
        if (!keys.is_array()) throw ParseError(p + ".keys: expected an array");
        for (std::size_t k = 0; k < keys.size(); ++k)
            track.keys.push_back(keyframe_from_json(keys[k], p + ".keys[" + std::to_string(k) + "]"));
        track.validate(scene.size());
        tracks.push_back(std::move(track));
    }
    return tracks;
}

} // namespace mirage
