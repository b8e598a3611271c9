#pragma once

// Domain types shared by every mirage module: flat Gaussians, scenes,
// the two-camera rig, RGB image buffers and the triangle soup.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mirage {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Quaternion stored as (w, x, y, z).
using Quat = Eigen::Vector4d;

/// Thickness of a flat Gaussian along its degenerate axis.
inline constexpr double kEpsilon = 1e-7;

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DegenerateTriangleError : public Error {
public:
    DegenerateTriangleError(std::size_t index, const std::string &what)
        : Error(what), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

// ---------------------------------------------------------------------------
// Small math helpers

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline Quat quat_identity() { return Quat(1.0, 0.0, 0.0, 0.0); }

/// Hamilton product a*b, both (w, x, y, z).
inline Quat quat_mul(const Quat &a, const Quat &b) {
    return Quat(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

/// Rotation matrix of q/|q|.
inline Mat3 rotation_from_quat(const Quat &q_raw) {
    const Quat q = q_raw / q_raw.norm();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Unit quaternion (w >= 0) for a proper rotation matrix.
inline Quat quat_from_rotation(const Mat3 &r) {
    Eigen::Quaterniond eq(r);
    eq.normalize();
    Quat q(eq.w(), eq.x(), eq.y(), eq.z());
    if (q[0] < 0) q = -q;
    return q;
}

// ---------------------------------------------------------------------------
// Gaussians and scenes

struct FlatGaussian {
    Vec3 mean = Vec3::Zero();
    Quat quat = quat_identity();
    Vec3 scales = Vec3(kEpsilon, 1.0, 1.0);
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();

    Mat3 rotation() const { return rotation_from_quat(quat); }
    double opacity() const { return sigmoid(opacity_logit); }

    /// R diag(s)^2 R^T
    Mat3 covariance() const {
        const Mat3 r = rotation();
        return r * scales.cwiseAbs2().asDiagonal() * r.transpose();
    }
};

enum class Mode { Amorphous, TwoD, Graphite };

inline std::string_view to_string(Mode m) {
    switch (m) {
    case Mode::Amorphous: return "amorphous";
    case Mode::TwoD: return "2d";
    case Mode::Graphite: return "graphite";
    }
    return "?";
}

inline Mode mode_from_string(std::string_view s) {
    if (s == "amorphous") return Mode::Amorphous;
    if (s == "2d" || s == "twod") return Mode::TwoD;
    if (s == "graphite") return Mode::Graphite;
    throw ParseError("unknown mode '" + std::string(s) + "' (expected amorphous, 2d or graphite)");
}

inline bool uses_phi(Mode m) { return m == Mode::TwoD || m == Mode::Graphite; }

struct CameraRig {
    double cam_dist = 2.4;
    double fov_vert = kPi / 3.0;
    int width = 128;
    int height = 128;
    bool mirror_enabled = true;

    double aspect() const { return static_cast<double>(width) / static_cast<double>(height); }

    void validate() const {
        if (!(cam_dist > 0)) throw ValidationError("camera: cam_dist must be > 0");
        if (!(fov_vert > 0 && fov_vert < kPi)) throw ValidationError("camera: fov_vert must lie in (0, pi)");
        if (width <= 0 || height <= 0) throw ValidationError("camera: resolution must be positive");
    }
};

/// Ordered Gaussians plus the control-mode bookkeeping. phi and gamma are
/// index-aligned with gaussians (empty when the mode does not use them).
struct Scene {
    std::vector<FlatGaussian> gaussians;
    Mode mode = Mode::Amorphous;
    std::vector<double> phi;
    std::vector<double> gamma;
    Vec3 background = Vec3::Zero();
    std::optional<CameraRig> rig;

    std::size_t size() const { return gaussians.size(); }
    bool empty() const { return gaussians.empty(); }

    /// Resizes phi/gamma to match the mode and Gaussian count.
    void sync_mode_params() {
        const std::size_t n = gaussians.size();
        if (uses_phi(mode)) phi.resize(n, 0.0); else phi.clear();
        if (mode == Mode::Graphite) gamma.resize(n, 0.0); else gamma.clear();
    }

    /// Keeps only the listed indices, in order, including mode parameters.
    void keep(const std::vector<std::size_t> &indices) {
        std::vector<FlatGaussian> g;
        std::vector<double> p, c;
        g.reserve(indices.size());
        for (std::size_t i : indices) {
            g.push_back(gaussians[i]);
            if (!phi.empty()) p.push_back(phi[i]);
            if (!gamma.empty()) c.push_back(gamma[i]);
        }
        gaussians = std::move(g);
        phi = std::move(p);
        gamma = std::move(c);
    }
};

// ---------------------------------------------------------------------------
// Images

/// Row-major interleaved RGB, one double per channel.
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int width, int height, double fill = 0.0)
        : width_(width), height_(height),
          pixels_(static_cast<std::size_t>(3) * width * height, fill) {
        if (width < 0 || height < 0) throw ShapeError("image: negative dimensions");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return pixels_.size(); }
    bool same_shape(const ImageBuffer &o) const { return width_ == o.width_ && height_ == o.height_; }

    double &at(int x, int y, int c) { return pixels_[index(x, y, c)]; }
    double at(int x, int y, int c) const { return pixels_[index(x, y, c)]; }

    Vec3 pixel(int x, int y) const {
        const std::size_t i = index(x, y, 0);
        return Vec3(pixels_[i], pixels_[i + 1], pixels_[i + 2]);
    }
    void set_pixel(int x, int y, const Vec3 &v) {
        const std::size_t i = index(x, y, 0);
        pixels_[i] = v[0];
        pixels_[i + 1] = v[1];
        pixels_[i + 2] = v[2];
    }

    std::vector<double> &data() { return pixels_; }
    const std::vector<double> &data() const { return pixels_; }

    void clamp01() {
        for (double &v : pixels_) v = std::clamp(v, 0.0, 1.0);
    }

    friend bool operator==(const ImageBuffer &, const ImageBuffer &) = default;

private:
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<double> pixels_;
};

inline void require_same_shape(const ImageBuffer &a, const ImageBuffer &b, std::string_view what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.width()) + "x" +
                         std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                         std::to_string(b.height()) + ")");
    }
}

/// output(x, y) = input(W-1-x, y)
inline ImageBuffer hflip(const ImageBuffer &img) {
    ImageBuffer out(img.width(), img.height());
    const int w = img.width();
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(w - 1 - x, y, c);
    return out;
}

inline double max_abs_diff(const ImageBuffer &a, const ImageBuffer &b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Triangle soup

struct FaceRep {
    std::array<Vec3, 3> v{Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};

    double doubled_area() const { return (v[1] - v[0]).cross(v[2] - v[0]).norm(); }
};

struct TriangleSoup {
    std::vector<FaceRep> triangles;
    std::vector<double> opacity_logit;
    std::vector<Vec3> color;

    std::size_t size() const { return triangles.size(); }
};

} // namespace mirage
