#pragma once

// Scene JSON serialization and 8-bit RGB image IO (binary PPM and PNG).

#include "mirage/core.hpp"

#include <json.hpp>
#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace mirage {

inline constexpr int kSceneFormatVersion = 1;

namespace detail {

using json = nlohmann::json;

inline json vec_to_json(const Eigen::VectorXd &v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline const json &field(const json &obj, const char *key, const std::string &path) {
    if (!obj.is_object()) throw ParseError(path + ": expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(path + "." + key + ": missing field");
    return *it;
}

inline double number(const json &j, const std::string &path) {
    if (!j.is_number()) throw ParseError(path + ": expected a number");
    return j.get<double>();
}

template <int N>
Eigen::Matrix<double, N, 1> fixed_vec(const json &j, const std::string &path) {
    if (!j.is_array() || j.size() != static_cast<std::size_t>(N))
        throw ParseError(path + ": expected an array of " + std::to_string(N) + " numbers");
    Eigen::Matrix<double, N, 1> v;
    for (int i = 0; i < N; ++i) v[i] = number(j[i], path + "[" + std::to_string(i) + "]");
    return v;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Scene JSON

inline nlohmann::json rig_to_json(const CameraRig &rig) {
    return {{"cam_dist", rig.cam_dist},
            {"fov_vert", rig.fov_vert},
            {"width", rig.width},
            {"height", rig.height},
            {"mirror", rig.mirror_enabled}};
}

inline CameraRig rig_from_json(const nlohmann::json &j, const std::string &path = "camera") {
    using namespace detail;
    CameraRig rig;
    rig.cam_dist = number(field(j, "cam_dist", path), path + ".cam_dist");
    rig.fov_vert = number(field(j, "fov_vert", path), path + ".fov_vert");
    rig.width = static_cast<int>(number(field(j, "width", path), path + ".width"));
    rig.height = static_cast<int>(number(field(j, "height", path), path + ".height"));
    if (auto it = j.find("mirror"); it != j.end()) {
        if (!it->is_boolean()) throw ParseError(path + ".mirror: expected a boolean");
        rig.mirror_enabled = it->get<bool>();
    }
    rig.validate();
    return rig;
}

inline nlohmann::json scene_to_json(const Scene &scene) {
    using detail::vec_to_json;
    nlohmann::json gs = nlohmann::json::array();
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const FlatGaussian &g = scene.gaussians[i];
        nlohmann::json e = {{"mean", vec_to_json(g.mean)},
                            {"quat", vec_to_json(g.quat)},
                            {"scales", vec_to_json(g.scales)},
                            {"opacity_logit", g.opacity_logit},
                            {"color", vec_to_json(g.color)}};
        if (i < scene.phi.size()) e["phi"] = scene.phi[i];
        if (i < scene.gamma.size()) e["gamma"] = scene.gamma[i];
        gs.push_back(std::move(e));
    }
    nlohmann::json j = {{"version", kSceneFormatVersion},
                        {"mode", std::string(to_string(scene.mode))},
                        {"background", vec_to_json(scene.background)},
                        {"gaussians", std::move(gs)}};
    if (scene.rig) j["camera"] = rig_to_json(*scene.rig);
    return j;
}

inline Scene scene_from_json(const nlohmann::json &j) {
    using namespace detail;
    const json &version = field(j, "version", "scene");
    if (!version.is_number_integer()) throw ParseError("scene.version: expected an integer");
    if (version.get<int>() != kSceneFormatVersion) {
        throw ParseError("scene.version: unsupported format version " + std::to_string(version.get<int>()) +
                         " (expected " + std::to_string(kSceneFormatVersion) + ")");
    }
    Scene s;
    const json &mode = field(j, "mode", "scene");
    if (!mode.is_string()) throw ParseError("scene.mode: expected a string");
    try {
        s.mode = mode_from_string(mode.get<std::string>());
    } catch (const ParseError &e) {
        throw ParseError(std::string("scene.mode: ") + e.what());
    }
    s.background = fixed_vec<3>(field(j, "background", "scene"), "scene.background");
    if (auto it = j.find("camera"); it != j.end()) s.rig = rig_from_json(*it, "scene.camera");

    const json &gs = field(j, "gaussians", "scene");
    if (!gs.is_array()) throw ParseError("scene.gaussians: expected an array");
    s.gaussians.reserve(gs.size());
    for (std::size_t i = 0; i < gs.size(); ++i) {
        const std::string p = "scene.gaussians[" + std::to_string(i) + "]";
        const json &e = gs[i];
        FlatGaussian g;
        g.mean = fixed_vec<3>(field(e, "mean", p), p + ".mean");
        g.quat = fixed_vec<4>(field(e, "quat", p), p + ".quat");
        g.scales = fixed_vec<3>(field(e, "scales", p), p + ".scales");
        g.opacity_logit = number(field(e, "opacity_logit", p), p + ".opacity_logit");
        g.color = fixed_vec<3>(field(e, "color", p), p + ".color");
        if (!(g.quat.norm() > 0)) throw ParseError(p + ".quat: zero quaternion");
        s.gaussians.push_back(g);
        if (uses_phi(s.mode)) s.phi.push_back(number(field(e, "phi", p), p + ".phi"));
        if (s.mode == Mode::Graphite) s.gamma.push_back(number(field(e, "gamma", p), p + ".gamma"));
    }
    return s;
}

inline std::string scene_to_string(const Scene &scene) { return scene_to_json(scene).dump(1) + "\n"; }

inline Scene scene_from_string(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error &e) {
        throw ParseError(std::string("scene: invalid JSON: ") + e.what());
    }
    return scene_from_json(j);
}

inline void scene_save(const Scene &scene, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << scene_to_string(scene);
    if (!out) throw Error("failed writing " + path.string());
}

inline std::string read_text_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Scene scene_load(const std::filesystem::path &path) { return scene_from_string(read_text_file(path)); }

// ---------------------------------------------------------------------------
// Images

inline std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

inline std::vector<std::uint8_t> to_rgb8(const ImageBuffer &img) {
    std::vector<std::uint8_t> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = quantize(img.data()[i]);
    return out;
}

inline ImageBuffer from_rgb8(int w, int h, const std::uint8_t *bytes) {
    ImageBuffer img(w, h);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = bytes[i] / 255.0;
    return img;
}

namespace detail {

inline void skip_ppm_space(std::istream &in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline ImageBuffer decode_ppm(const std::string &bytes) {
    std::istringstream in(bytes);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw Error("ppm: only binary P6 pixmaps are supported");
    int w = 0, h = 0, maxval = 0;
    skip_ppm_space(in);
    in >> w;
    skip_ppm_space(in);
    in >> h;
    skip_ppm_space(in);
    in >> maxval;
    if (!in || w <= 0 || h <= 0) throw Error("ppm: malformed header");
    if (maxval != 255) throw Error("ppm: unsupported bit depth (maxval " + std::to_string(maxval) + ", expected 255)");
    in.get();
    std::vector<std::uint8_t> data(static_cast<std::size_t>(3) * w * h);
    in.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(data.size()));
    if (in.gcount() != static_cast<std::streamsize>(data.size())) throw Error("ppm: truncated pixel data");
    return from_rgb8(w, h, data.data());
}

inline std::string encode_ppm(const ImageBuffer &img) {
    std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    const auto rgb = to_rgb8(img);
    out.append(reinterpret_cast<const char *>(rgb.data()), rgb.size());
    return out;
}

struct PngReadCursor {
    const std::string *bytes;
    std::size_t offset;
};

inline void png_read_from_memory(png_structp png, png_bytep out, png_size_t n) {
    auto *cur = static_cast<PngReadCursor *>(png_get_io_ptr(png));
    if (cur->offset + n > cur->bytes->size()) png_error(png, "truncated png stream");
    std::memcpy(out, cur->bytes->data() + cur->offset, n);
    cur->offset += n;
}

inline void png_write_to_memory(png_structp png, png_bytep data, png_size_t n) {
    auto *out = static_cast<std::string *>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char *>(data), n);
}

inline void png_flush_noop(png_structp) {}

[[noreturn]] inline void png_throw(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }

inline void png_warn_silent(png_structp, png_const_charp) {}

inline ImageBuffer decode_png(const std::string &bytes) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_warn_silent);
    if (!png) throw Error("png: cannot allocate reader");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_read_struct(p, i, nullptr); }
    } guard{&png, &info};

    PngReadCursor cursor{&bytes, 0};
    png_set_read_fn(png, &cursor, png_read_from_memory);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int type = png_get_color_type(png, info);
    if (depth != 8) throw Error("png: unsupported bit depth " + std::to_string(depth) + " (expected 8)");
    if (type != PNG_COLOR_TYPE_RGB) {
        const int channels = png_get_channels(png, info);
        throw Error("png: unsupported channel layout (" + std::to_string(channels) +
                    " channels, color type " + std::to_string(type) + "; expected 8-bit RGB)");
    }
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    std::vector<std::uint8_t> data(static_cast<std::size_t>(3) * w * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + static_cast<std::size_t>(3) * w * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    return from_rgb8(static_cast<int>(w), static_cast<int>(h), data.data());
}

} // namespace detail

/// Encodes as an 8-bit RGB PNG in memory.
inline std::string encode_png(const ImageBuffer &img) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_throw,
                                              detail::png_warn_silent);
    if (!png) throw Error("png: cannot allocate writer");
    png_infop info = png_create_info_struct(png);
    struct Guard {
        png_structp *p;
        png_infop *i;
        ~Guard() { png_destroy_write_struct(p, i); }
    } guard{&png, &info};

    std::string out;
    png_set_write_fn(png, &out, detail::png_write_to_memory, detail::png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto rgb = to_rgb8(img);
    for (int y = 0; y < img.height(); ++y) png_write_row(png, rgb.data() + static_cast<std::size_t>(3) * img.width() * y);
    png_write_end(png, nullptr);
    return out;
}

inline ImageBuffer decode_image(const std::string &bytes) {
    if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0)
        return detail::decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P') return detail::decode_ppm(bytes);
    throw Error("image: unrecognized container (expected PNG or binary PPM)");
}

inline ImageBuffer image_load(const std::filesystem::path &path) {
    try {
        return decode_image(read_text_file(path));
    } catch (const Error &e) {
        throw Error(path.string() + ": " + e.what());
    }
}

/// Container chosen by extension: .ppm writes P6, anything else PNG.
inline void image_save(const ImageBuffer &img, const std::filesystem::path &path) {
    const std::string ext = path.extension().string();
    const std::string bytes = (ext == ".ppm" || ext == ".PPM") ? detail::encode_ppm(img) : encode_png(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + path.string());
}

} // namespace mirage
