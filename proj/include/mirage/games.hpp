#pragma once

// Triangle <-> flat Gaussian parametrization and the rotation helpers the
// control modes are built on.
//
// A flat Gaussian (m, R = [r1 r2 r3], S = diag(eps, s2, s3)) maps to the
// triangle (m, m + s2 r2, m + s3 r3). The inverse recovers m from the first
// vertex, r1 from the face normal, r2 from the first edge and r3 from one
// Gram-Schmidt step on the second edge.

#include "mirage/core.hpp"

#include <string>

namespace mirage {

struct GaussianFrame {
    Vec3 mean;
    Mat3 rotation;
    Vec3 scales;
};

inline double orthonormality_error(const Mat3 &r) {
    return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

inline FaceRep triangle_from_gaussian(const Vec3 &mean, const Mat3 &r, const Vec3 &scales) {
    if (orthonormality_error(r) > 1e-5) throw ValidationError("triangle_from_gaussian: rotation is not orthonormal");
    FaceRep f;
    f.v[0] = mean;
    f.v[1] = mean + scales[1] * r.col(1);
    f.v[2] = mean + scales[2] * r.col(2);
    return f;
}

inline FaceRep triangle_from_gaussian(const FlatGaussian &g) {
    return triangle_from_gaussian(g.mean, g.rotation(), g.scales);
}

/// normalize(v - <v,r1> r1 - <v,r2> r2)
inline Vec3 orth_step(const Vec3 &v, const Vec3 &r1, const Vec3 &r2) {
    const Vec3 w = v - v.dot(r1) * r1 - v.dot(r2) * r2;
    const double n = w.norm();
    if (n < 1e-12) throw ValidationError("orth_step: vector lies in span{r1, r2}");
    return w / n;
}

/// Recovers (mean, R, S) from a face. `index` only labels the error.
inline GaussianFrame gaussian_from_triangle(const FaceRep &face, std::size_t index = 0) {
    const Vec3 e2 = face.v[1] - face.v[0];
    const Vec3 e3 = face.v[2] - face.v[0];
    const Vec3 normal = e2.cross(e3);
    const double area2 = normal.norm();
    if (area2 <= 1e-12 || e2.norm() <= 1e-12) {
        throw DegenerateTriangleError(index, "degenerate triangle at index " + std::to_string(index) +
                                                 " (cross-product norm " + std::to_string(area2) + ")");
    }
    GaussianFrame out;
    out.mean = face.v[0];
    const Vec3 r1 = normal / area2;
    const Vec3 r2 = e2 / e2.norm();
    const Vec3 r3 = orth_step(e3, r1, r2);
    out.rotation.col(0) = r1;
    out.rotation.col(1) = r2;
    out.rotation.col(2) = r3;
    out.scales = Vec3(kEpsilon, e2.norm(), e3.dot(r3));
    return out;
}

/// Proper rotation Q with Q a/|a| = b/|b|.
inline Mat3 rotation_between(const Vec3 &a, const Vec3 &b) {
    const Vec3 ua = a.normalized();
    const Vec3 ub = b.normalized();
    const Vec3 axis = ua.cross(ub);
    const double s = axis.norm();
    const double c = ua.dot(ub);
    if (s < 1e-12) {
        if (c > 0) return Mat3::Identity();
        // Half turn about an axis perpendicular to a.
        Vec3 ref = Vec3::UnitX();
        if ((ua - ref).norm() < 1e-6 || (ua + ref).norm() < 1e-6) ref = Vec3::UnitY();
        const Vec3 u = (ref - ref.dot(ua) * ua).normalized();
        return 2.0 * u * u.transpose() - Mat3::Identity();
    }
    const Vec3 k = axis / s;
    const double angle = std::atan2(s, c);
    Mat3 kx;
    kx << 0, -k.z(), k.y(), k.z(), 0, -k.x(), -k.y(), k.x(), 0;
    return std::cos(angle) * Mat3::Identity() + std::sin(angle) * kx + (1.0 - std::cos(angle)) * k * k.transpose();
}

/// Fixed quarter turn about z that carries the degenerate axis e1 onto e2.
inline Quat base_plane_quat() { return Quat(std::cos(kPi / 4.0), 0.0, 0.0, std::sin(kPi / 4.0)); }

/// q_z * q_x(phi): disc parallel to the XZ plane, in-plane axes turned by phi.
inline Quat quaternion_from_phi(double phi) {
    const Quat qx(std::cos(phi / 2.0), std::sin(phi / 2.0), 0.0, 0.0);
    return quat_mul(base_plane_quat(), qx);
}

/// d quaternion_from_phi / d phi
inline Quat quaternion_from_phi_derivative(double phi) {
    const Quat dqx(-0.5 * std::sin(phi / 2.0), 0.5 * std::cos(phi / 2.0), 0.0, 0.0);
    return quat_mul(base_plane_quat(), dqx);
}

/// Inverse of quaternion_from_phi read off the second axis, which for the
/// plane rotation is (-cos phi, 0, sin phi).
inline double phi_from_axis(const Vec3 &r2) { return std::atan2(r2.z(), -r2.x()); }

inline FaceRep face_of(const Scene &scene, std::size_t i) { return triangle_from_gaussian(scene.gaussians.at(i)); }

/// Rebuilds Gaussian i from a face under the scene's mode constraints.
/// TwoD requires every vertex on y = 0; Graphite requires a face parallel
/// to the XZ plane. Mirrored windings are accepted: the covariance is
/// unchanged when the third axis flips sign.
inline void assign_face(Scene &scene, std::size_t i, const FaceRep &face, double plane_tol = 1e-6) {
    auto vertex_label = [&](int k) {
        return "gaussian " + std::to_string(i) + " vertex " + std::to_string(k);
    };
    if (scene.mode == Mode::TwoD) {
        for (int k = 0; k < 3; ++k)
            if (std::abs(face.v[k].y()) > plane_tol)
                throw ValidationError(vertex_label(k) + " leaves the XZ plane (y = " + std::to_string(face.v[k].y()) +
                                      ") in 2d mode");
    } else if (scene.mode == Mode::Graphite) {
        for (int k = 1; k < 3; ++k)
            if (std::abs(face.v[k].y() - face.v[0].y()) > plane_tol)
                throw ValidationError(vertex_label(k) + " tilts the face out of its XZ-parallel layer in graphite mode");
    }

    const GaussianFrame frame = gaussian_from_triangle(face, i);
    FlatGaussian &g = scene.gaussians.at(i);
    g.scales = frame.scales;
    if (scene.mode == Mode::Amorphous) {
        g.mean = frame.mean;
        g.quat = quat_from_rotation(frame.rotation);
        return;
    }
    scene.sync_mode_params();
    const double phi = phi_from_axis(frame.rotation.col(1));
    scene.phi[i] = phi;
    g.quat = quaternion_from_phi(phi);
    g.mean = frame.mean;
    if (scene.mode == Mode::TwoD) {
        g.mean.y() = 0.0;
    } else {
        scene.gamma[i] = frame.mean.y();
    }
}

inline TriangleSoup soup_from_scene(const Scene &scene) {
    TriangleSoup soup;
    soup.triangles.reserve(scene.size());
    for (const FlatGaussian &g : scene.gaussians) {
        soup.triangles.push_back(triangle_from_gaussian(g));
        soup.opacity_logit.push_back(g.opacity_logit);
        soup.color.push_back(g.color);
    }
    return soup;
}

} // namespace mirage
