#pragma once

// Differentiable splatting of flat Gaussians through a pinhole camera.
//
// Gaussians are projected with the local affine approximation of the
// perspective map, sorted once per image by camera depth and composited
// front to back:
//
//   C = sum_i c_i a_i prod_{j<i} (1 - a_j) + bg prod_i (1 - a_i)
//   a_i = min(0.99, o_i exp(-1/2 d^T cov2d^-1 d))
//
// Contributions below 1/255 and pixels outside the 3-sigma box are
// skipped. Because the depth order is global, compositing can run
// Gaussian-major over each Gaussian's pixel box and still visit every
// pixel's contributors in front-to-back order.

#include "mirage/camera.hpp"
#include "mirage/core.hpp"
#include "mirage/games.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

namespace mirage {

inline constexpr double kAlphaMax = 0.99;
inline constexpr double kAlphaMin = 1.0 / 255.0;
inline constexpr double kCov2dFloor = 0.3;
inline constexpr double kNearPlane = 0.01;

struct ProjectedGaussian {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    Mat2 conic = Mat2::Identity();
    double depth = 0.0;
    double alpha_peak = 0.0;
    Vec3 color = Vec3::Zero();
    // Inclusive pixel box covered by the 3-sigma extent.
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

/// Returns nullopt when the mean is in front of the near plane or the
/// 3-sigma box misses the viewport.
inline std::optional<ProjectedGaussian> project(const FlatGaussian &g, const Camera &cam) {
    const Vec3 t = cam.to_camera(g.mean);
    if (t.z() <= kNearPlane) return std::nullopt;

    ProjectedGaussian p;
    p.depth = t.z();
    const double iz = 1.0 / t.z();
    p.mean2d = Vec2(cam.fx * t.x() * iz + cam.cx, cam.fy * t.y() * iz + cam.cy);

    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * iz, 0.0, -cam.fx * t.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * t.y() * iz * iz;
    const Eigen::Matrix<double, 2, 3> jw = j * cam.world_to_cam;
    p.cov2d = jw * g.covariance() * jw.transpose();
    p.cov2d(0, 0) += kCov2dFloor;
    p.cov2d(1, 1) += kCov2dFloor;
    p.cov2d(0, 1) = p.cov2d(1, 0) = 0.5 * (p.cov2d(0, 1) + p.cov2d(1, 0));

    const double a = p.cov2d(0, 0), b = p.cov2d(0, 1), c = p.cov2d(1, 1);
    const double det = a * c - b * b;
    if (!(det > 0.0)) return std::nullopt;
    p.conic << c / det, -b / det, -b / det, a / det;

    const double mid = 0.5 * (a + c);
    const double lambda_max = mid + std::sqrt(std::max(0.1, mid * mid - det));
    const double radius = 3.0 * std::sqrt(lambda_max);
    p.x0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.x() - radius - 0.5)));
    p.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.mean2d.x() + radius - 0.5)));
    p.y0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.y() - radius - 0.5)));
    p.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.mean2d.y() + radius - 0.5)));
    if (p.x0 > p.x1 || p.y0 > p.y1) return std::nullopt;

    p.alpha_peak = g.opacity();
    p.color = g.color;
    return p;
}

/// Stable ascending permutation by depth.
inline std::vector<std::size_t> depth_sort(const std::vector<ProjectedGaussian> &projected) {
    std::vector<std::size_t> perm(projected.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t l, std::size_t r) { return projected[l].depth < projected[r].depth; });
    return perm;
}

/// Everything the backward pass needs from a forward pass.
struct RenderState {
    std::vector<ProjectedGaussian> projected;
    std::vector<std::uint32_t> source;  // projected[k] came from gaussians[source[k]]
    std::vector<std::size_t> order;     // front-to-back indices into projected
    std::vector<double> final_transmittance;
    // Falloff of every pixel visited, Gaussian by Gaussian in sorted order;
    // falloff_begin[k] is where projected[k] starts.
    std::vector<double> falloff;
    std::vector<std::size_t> falloff_begin;
    int width = 0;
    int height = 0;
};

/// Per-pixel front-to-back contributor lists (Gaussian indices), for
/// inspection and finite-difference checks with a frozen active set.
struct RenderTrace {
    std::vector<std::vector<std::uint32_t>> contributors;
};

namespace detail {

struct PixelAlpha {
    double alpha;
    double falloff;
    bool clamped;
};

/// exp(power) of projected Gaussian p at pixel (x, y), or -1 when the
/// quadratic form is negative (rounding only).
inline double pixel_falloff(const ProjectedGaussian &p, int x, int y) {
    const double dx = x + 0.5 - p.mean2d.x();
    const double dy = y + 0.5 - p.mean2d.y();
    const double power = -0.5 * (p.conic(0, 0) * dx * dx + p.conic(1, 1) * dy * dy) - p.conic(0, 1) * dx * dy;
    return power > 0.0 ? -1.0 : std::exp(power);
}

/// Alpha for a falloff from pixel_falloff and whether it contributes.
inline bool alpha_from_falloff(const ProjectedGaussian &p, double falloff, PixelAlpha &out) {
    if (falloff < 0.0) return false;
    out.falloff = falloff;
    const double raw = p.alpha_peak * falloff;
    if (raw < kAlphaMin) return false;
    out.clamped = raw > kAlphaMax;
    out.alpha = out.clamped ? kAlphaMax : raw;
    return true;
}

/// Alpha of projected Gaussian p at pixel (x, y) and whether it contributes.
inline bool pixel_alpha(const ProjectedGaussian &p, int x, int y, PixelAlpha &out) {
    return alpha_from_falloff(p, pixel_falloff(p, x, y), out);
}

/// Columns of row y inside p's box where alpha can reach kAlphaMin, padded
/// by a pixel. pixel_alpha stays the exact test.
inline bool row_span(const ProjectedGaussian &p, int y, int &xa, int &xb) {
    if (!(p.alpha_peak >= kAlphaMin)) return false;
    const double two_l = 2.0 * std::log(kAlphaMin / p.alpha_peak);
    const double a = p.conic(0, 0), b = p.conic(0, 1), c = p.conic(1, 1);
    const double dy = y + 0.5 - p.mean2d.y();
    const double disc = b * b * dy * dy - a * (c * dy * dy + two_l);
    if (disc < 0.0) return false;
    const double root = std::sqrt(disc);
    const double lo = p.mean2d.x() - 0.5 + (-b * dy - root) / a;
    const double hi = p.mean2d.x() - 0.5 + (-b * dy + root) / a;
    xa = std::max(p.x0, static_cast<int>(std::floor(lo)) - 1);
    xb = std::min(p.x1, static_cast<int>(std::ceil(hi)) + 1);
    return xa <= xb;
}

} // namespace detail

inline ImageBuffer render(const Scene &scene, const Camera &cam, const Vec3 &background, RenderState *state = nullptr,
                          RenderTrace *trace = nullptr) {
    RenderState local;
    RenderState &st = state ? *state : local;
    st.projected.clear();
    st.source.clear();
    st.falloff.clear();
    st.width = cam.width;
    st.height = cam.height;
    st.projected.reserve(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (auto p = project(scene.gaussians[i], cam)) {
            st.projected.push_back(*p);
            st.source.push_back(static_cast<std::uint32_t>(i));
        }
    }
    st.order = depth_sort(st.projected);

    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    ImageBuffer img(cam.width, cam.height);
    std::vector<double> &color = img.data();
    st.final_transmittance.assign(npix, 1.0);
    if (trace) trace->contributors.assign(npix, {});

    st.falloff_begin.assign(st.projected.size(), 0);
    detail::PixelAlpha pa{};
    for (std::size_t k : st.order) {
        const ProjectedGaussian &p = st.projected[k];
        st.falloff_begin[k] = st.falloff.size();
        for (int y = p.y0; y <= p.y1; ++y) {
            int xa, xb;
            if (!detail::row_span(p, y, xa, xb)) continue;
            const std::size_t row = st.falloff.size();
            st.falloff.resize(row + static_cast<std::size_t>(xb - xa + 1));
            double *cache = st.falloff.data() + row;
            for (int x = xa; x <= xb; ++x) {
                const double f = detail::pixel_falloff(p, x, y);
                *cache++ = f;
                if (!detail::alpha_from_falloff(p, f, pa)) continue;
                const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
                double &t = st.final_transmittance[pix];
                const double w = pa.alpha * t;
                color[3 * pix] += p.color[0] * w;
                color[3 * pix + 1] += p.color[1] * w;
                color[3 * pix + 2] += p.color[2] * w;
                t *= 1.0 - pa.alpha;
                if (trace) trace->contributors[pix].push_back(st.source[k]);
            }
        }
    }
    for (std::size_t pix = 0; pix < npix; ++pix) {
        const double t = st.final_transmittance[pix];
        for (int c = 0; c < 3; ++c) color[3 * pix + c] += background[c] * t;
    }
    return img;
}

inline ImageBuffer render(const Scene &scene, const Camera &cam) { return render(scene, cam, scene.background); }

// ---------------------------------------------------------------------------
// Backward pass

struct GaussianGrad {
    Vec3 mean = Vec3::Zero();
    Quat quat = Quat::Zero();
    Vec3 scales = Vec3::Zero(); // entry 0 (the pinned epsilon axis) stays zero
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();
    double phi = 0.0;
    double gamma = 0.0;
};

struct ParamGrads {
    std::vector<GaussianGrad> g;

    explicit ParamGrads(std::size_t n = 0) : g(n) {}

    void add(const ParamGrads &o) {
        if (g.size() != o.g.size()) throw ShapeError("ParamGrads::add: size mismatch");
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i].mean += o.g[i].mean;
            g[i].quat += o.g[i].quat;
            g[i].scales += o.g[i].scales;
            g[i].opacity_logit += o.g[i].opacity_logit;
            g[i].color += o.g[i].color;
            g[i].phi += o.g[i].phi;
            g[i].gamma += o.g[i].gamma;
        }
    }
};

/// dL/dq for R(q/|q|) given G = dL/dR.
inline Quat quat_grad_from_rotation_grad(const Quat &q_raw, const Mat3 &G) {
    const double n = q_raw.norm();
    const Quat q = q_raw / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Quat gq;
    gq[0] = 2 * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1));
    gq[1] = 2 * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0) +
                 w * G(2, 1) - 2 * x * G(2, 2));
    gq[2] = 2 * (-2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) - w * G(2, 0) +
                 z * G(2, 1) - 2 * y * G(2, 2));
    gq[3] = 2 * (-2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2) +
                 x * G(2, 0) + y * G(2, 1));
    return (gq - q * q.dot(gq)) / n;
}

/// Reverse mode of render(). `loss_grad` holds dL/dC per pixel and channel.
inline ParamGrads render_backward(const Scene &scene, const Camera &cam, const RenderState &st,
                                  const ImageBuffer &loss_grad) {
    if (loss_grad.width() != cam.width || loss_grad.height() != cam.height || st.width != cam.width ||
        st.height != cam.height) {
        throw ShapeError("render_backward: loss gradient resolution does not match the camera");
    }
    if (st.falloff_begin.size() != st.projected.size())
        throw ShapeError("render_backward: render state was not filled by render()");
    ParamGrads grads(scene.size());
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    const std::vector<double> &dc = loss_grad.data();

    std::vector<double> trans = st.final_transmittance;
    std::vector<double> behind(3 * npix);
    for (std::size_t pix = 0; pix < npix; ++pix)
        for (int c = 0; c < 3; ++c) behind[3 * pix + c] = scene.background[c] * trans[pix];

    detail::PixelAlpha pa{};
    for (auto it = st.order.rbegin(); it != st.order.rend(); ++it) {
        const std::size_t k = *it;
        const ProjectedGaussian &p = st.projected[k];
        Vec2 g_mean2d = Vec2::Zero();
        double g_a = 0.0, g_b = 0.0, g_c = 0.0; // conic entries (A00, A01 shared, A11)
        double g_opacity = 0.0;
        Vec3 g_color = Vec3::Zero();

        const double *cached = st.falloff.data() + st.falloff_begin[k];
        for (int y = p.y0; y <= p.y1; ++y) {
            int xa, xb;
            if (!detail::row_span(p, y, xa, xb)) continue;
            for (int x = xa; x <= xb; ++x) {
                if (!detail::alpha_from_falloff(p, *cached++, pa)) continue;
                const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
                const double inv_one_minus = 1.0 / (1.0 - pa.alpha);
                const double t_before = trans[pix] * inv_one_minus;
                const double w = pa.alpha * t_before;
                double g_alpha = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double d = dc[3 * pix + c];
                    g_color[c] += w * d;
                    g_alpha += d * (p.color[c] * t_before - behind[3 * pix + c] * inv_one_minus);
                    behind[3 * pix + c] += p.color[c] * w;
                }
                trans[pix] = t_before;
                if (pa.clamped) continue;
                g_opacity += g_alpha * pa.falloff;
                const double g_power = g_alpha * pa.alpha;
                const double dx = x + 0.5 - p.mean2d.x();
                const double dy = y + 0.5 - p.mean2d.y();
                g_mean2d.x() += g_power * (p.conic(0, 0) * dx + p.conic(0, 1) * dy);
                g_mean2d.y() += g_power * (p.conic(0, 1) * dx + p.conic(1, 1) * dy);
                g_a += -0.5 * g_power * dx * dx;
                g_b += -g_power * dx * dy;
                g_c += -0.5 * g_power * dy * dy;
            }
        }

        // Chain back to the 3D parameters.
        const std::size_t i = st.source[k];
        const FlatGaussian &g = scene.gaussians[i];
        GaussianGrad &out = grads.g[i];
        out.color += g_color;
        const double o = p.alpha_peak;
        out.opacity_logit += g_opacity * o * (1.0 - o);

        Mat2 g_conic;
        g_conic << g_a, 0.5 * g_b, 0.5 * g_b, g_c;
        const Mat2 g_cov2d = -p.conic * g_conic * p.conic;

        const Vec3 t = cam.to_camera(g.mean);
        const double iz = 1.0 / t.z();
        const double iz2 = iz * iz;
        Eigen::Matrix<double, 2, 3> j;
        j << cam.fx * iz, 0.0, -cam.fx * t.x() * iz2, 0.0, cam.fy * iz, -cam.fy * t.y() * iz2;
        const Mat3 &w2c = cam.world_to_cam;
        const Mat3 r = g.rotation();
        const Vec3 s2 = g.scales.cwiseAbs2();
        const Mat3 cov3 = r * s2.asDiagonal() * r.transpose();
        const Mat3 m = w2c * cov3 * w2c.transpose();

        const Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_cov2d * j * m;
        const Mat3 g_m = j.transpose() * g_cov2d * j;
        const Mat3 g_cov3 = w2c.transpose() * g_m * w2c;
        const Mat3 g_r = 2.0 * g_cov3 * r * s2.asDiagonal();
        const Mat3 rgr = r.transpose() * g_cov3 * r;
        out.scales[1] += 2.0 * g.scales[1] * rgr(1, 1);
        out.scales[2] += 2.0 * g.scales[2] * rgr(2, 2);
        out.quat += quat_grad_from_rotation_grad(g.quat, g_r);

        Vec3 g_t = Vec3::Zero();
        g_t.x() += g_mean2d.x() * cam.fx * iz;
        g_t.z() += -g_mean2d.x() * cam.fx * t.x() * iz2;
        g_t.y() += g_mean2d.y() * cam.fy * iz;
        g_t.z() += -g_mean2d.y() * cam.fy * t.y() * iz2;
        g_t.x() += g_j(0, 2) * (-cam.fx * iz2);
        g_t.y() += g_j(1, 2) * (-cam.fy * iz2);
        g_t.z() += g_j(0, 0) * (-cam.fx * iz2) + g_j(0, 2) * (2.0 * cam.fx * t.x() * iz2 * iz) +
                   g_j(1, 1) * (-cam.fy * iz2) + g_j(1, 2) * (2.0 * cam.fy * t.y() * iz2 * iz);
        out.mean += w2c.transpose() * g_t;
    }

    // Mode parameters.
    for (std::size_t i = 0; i < scene.size(); ++i) {
        GaussianGrad &out = grads.g[i];
        if (i < scene.phi.size()) out.phi = out.quat.dot(quaternion_from_phi_derivative(scene.phi[i]));
        if (i < scene.gamma.size()) out.gamma = out.mean.y();
    }
    return grads;
}

/// Convenience form that reruns the forward pass; `target` is accepted for
/// call-site symmetry with the loss and is not read.
inline ParamGrads render_backward(const Scene &scene, const Camera &cam, const ImageBuffer & /*target*/,
                                  const ImageBuffer &loss_grad) {
    if (loss_grad.width() != cam.width || loss_grad.height() != cam.height)
        throw ShapeError("render_backward: loss gradient resolution does not match the camera");
    RenderState st;
    render(scene, cam, scene.background, &st);
    return render_backward(scene, cam, st, loss_grad);
}

} // namespace mirage
