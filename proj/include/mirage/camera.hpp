#pragma once

#include "mirage/core.hpp"

namespace mirage {

enum class View { Primary, Mirror };

/// Pinhole camera; camera axes are (right, down, forward) and pixel (i, j)
/// has its center at (i + 0.5, j + 0.5).
struct Camera {
    Vec3 position = Vec3::Zero();
    Mat3 world_to_cam = Mat3::Identity();
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 0;
    int height = 0;

    Vec3 to_camera(const Vec3 &p) const { return world_to_cam * (p - position); }
};

/// Both cameras sit on the Y axis facing the origin with up = +Z. The
/// primary camera's image x runs along +X, the mirror camera's along -X.
inline Camera make_camera(const CameraRig &rig, View view, int width = 0, int height = 0) {
    rig.validate();
    Camera cam;
    cam.width = width > 0 ? width : rig.width;
    cam.height = height > 0 ? height : rig.height;
    const double sign = view == View::Primary ? 1.0 : -1.0;
    const Vec3 forward(0.0, sign, 0.0);
    const Vec3 down(0.0, 0.0, -1.0);
    const Vec3 right = down.cross(forward);
    cam.world_to_cam.row(0) = right.transpose();
    cam.world_to_cam.row(1) = down.transpose();
    cam.world_to_cam.row(2) = forward.transpose();
    cam.position = Vec3(0.0, -sign * rig.cam_dist, 0.0);
    cam.fy = 0.5 * cam.height / std::tan(0.5 * rig.fov_vert);
    cam.fx = cam.fy;
    cam.cx = 0.5 * cam.width;
    cam.cy = 0.5 * cam.height;
    return cam;
}

} // namespace mirage
