#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>

namespace luxmix {

// World frame is z-up. Camera-local frame: +x forward, +y left, +z up.
//
// Directions are parameterized by azimuth and elevation:
//   d(az, el) = (cos el cos az, -cos el sin az, sin el)
// so positive azimuth turns right. Equirectangular images map azimuth
// [-pi, pi) left-to-right and elevation [pi/2, -pi/2] top-to-bottom, with
// pixel centers at half-integer coordinates.

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
/// Camera-to-world rigid transform.
using Pose = Eigen::Isometry3d;

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> direction_from_angles(Scalar azimuth, Scalar elevation) {
    const Scalar ce = std::cos(elevation);
    return {ce * std::cos(azimuth), -ce * std::sin(azimuth), std::sin(elevation)};
}

/// (azimuth, elevation) of a nonzero direction.
template <typename Derived>
Vec2 angles_from_direction(const Eigen::MatrixBase<Derived>& d) {
    const double az = std::atan2(-double(d.y()), double(d.x()));
    const double el = std::atan2(double(d.z()), std::hypot(double(d.x()), double(d.y())));
    return {az, el};
}

/// Rotation taking the local forward axis to d(az, el) with zero roll.
inline Eigen::Matrix3d rotation_from_view(double azimuth, double elevation) {
    return (Eigen::AngleAxisd(-azimuth, Vec3::UnitZ()) * Eigen::AngleAxisd(-elevation, Vec3::UnitY())).toRotationMatrix();
}

inline Pose make_pose(const Eigen::Matrix3d& rotation, const Vec3& position) {
    Pose p = Pose::Identity();
    p.linear() = rotation;
    p.translation() = position;
    return p;
}

/// Continuous equirect pixel coordinate of a direction's angles.
inline Vec2 equirect_coords(double azimuth, double elevation, int width, int height) {
    const double u = (azimuth + std::numbers::pi) / (2.0 * std::numbers::pi) * width;
    const double v = (std::numbers::pi / 2.0 - elevation) / std::numbers::pi * height;
    return {u, v};
}

enum class CameraKind { Perspective, Equirect };

struct Camera {
    CameraKind kind = CameraKind::Perspective;
    int width = 0;
    int height = 0;
    /// Horizontal field of view for perspective cameras.
    double fov_deg = 60.0;
    Pose pose = Pose::Identity();

    static Camera perspective(double fov_deg, int width, int height, const Pose& pose) {
        Camera c{CameraKind::Perspective, width, height, fov_deg, pose};
        c.validate();
        return c;
    }

    static Camera equirect(int width, int height, const Pose& pose) {
        Camera c{CameraKind::Equirect, width, height, 360.0, pose};
        c.validate();
        return c;
    }

    void validate() const {
        if (width <= 0 || height <= 0) throw std::invalid_argument("camera: resolution must be positive");
        if (kind == CameraKind::Perspective && !(fov_deg > 0.0 && fov_deg < 180.0))
            throw std::invalid_argument("camera: field of view must be in (0, 180)");
        if (kind == CameraKind::Equirect && width != 2 * height)
            throw std::invalid_argument("camera: equirect width must be twice the height");
    }

    Vec3 position() const { return pose.translation(); }

    /// Focal length in pixels (perspective).
    double focal() const { return 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0); }

    /// Unit local-frame direction through continuous pixel coordinate (px, py).
    Vec3 local_direction(double px, double py) const {
        if (kind == CameraKind::Equirect) {
            const double az = px / width * 2.0 * std::numbers::pi - std::numbers::pi;
            const double el = std::numbers::pi / 2.0 - py / height * std::numbers::pi;
            return direction_from_angles(az, el);
        }
        const double f = focal();
        const double right = (px - 0.5 * width) / f;
        const double up = (0.5 * height - py) / f;
        return Vec3(1.0, -right, up).normalized();
    }

    /// World direction through the center of pixel (x, y).
    Vec3 pixel_direction(int x, int y) const { return pose.linear() * local_direction(x + 0.5, y + 0.5); }

    /// Continuous pixel coordinate of a world point; empty when behind a
    /// perspective camera. Result may fall outside the image.
    std::optional<Vec2> project(const Vec3& world) const {
        const Vec3 local = pose.linear().transpose() * (world - pose.translation());
        if (kind == CameraKind::Equirect) {
            if (local.squaredNorm() == 0.0) return std::nullopt;
            const Vec2 ang = angles_from_direction(local);
            return equirect_coords(ang.x(), ang.y(), width, height);
        }
        if (local.x() <= 1e-9) return std::nullopt;
        const double f = focal();
        return Vec2(0.5 * width - f * local.y() / local.x(), 0.5 * height - f * local.z() / local.x());
    }

    bool in_bounds(const Vec2& px) const { return px.x() >= 0.0 && px.y() >= 0.0 && px.x() < width && px.y() < height; }
};

/// Geodesic angle between two rotations, radians.
inline double rotation_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
    const double c = std::clamp(0.5 * ((a.transpose() * b).trace() - 1.0), -1.0, 1.0);
    return std::acos(c);
}

template <typename Scalar>
struct Ray {
    Eigen::Matrix<Scalar, 3, 1> origin;
    Eigen::Matrix<Scalar, 3, 1> direction;

    Eigen::Matrix<Scalar, 3, 1> at(Scalar t) const { return origin + t * direction; }
};

template <typename Scalar>
struct Box {
    Eigen::Matrix<Scalar, 3, 1> min;
    Eigen::Matrix<Scalar, 3, 1> max;

    bool contains(const Eigen::Matrix<Scalar, 3, 1>& p, Scalar eps = Scalar(0)) const {
        return (p.array() >= min.array() - eps).all() && (p.array() <= max.array() + eps).all();
    }
    bool contains(const Box& other) const { return contains(other.min) && contains(other.max); }
    Eigen::Matrix<Scalar, 3, 1> center() const { return Scalar(0.5) * (min + max); }
    Eigen::Matrix<Scalar, 3, 1> extent() const { return max - min; }
};

/// Slab test. Returns (t_enter, t_exit) with t_enter <= t_exit when the line hits.
template <typename Scalar>
std::optional<std::pair<Scalar, Scalar>> intersect_box(const Ray<Scalar>& ray, const Box<Scalar>& box) {
    Scalar t0 = -std::numeric_limits<Scalar>::infinity();
    Scalar t1 = std::numeric_limits<Scalar>::infinity();
    for (int a = 0; a < 3; ++a) {
        const Scalar d = ray.direction[a];
        const Scalar o = ray.origin[a];
        if (d == Scalar(0)) {
            if (o < box.min[a] || o > box.max[a]) return std::nullopt;
            continue;
        }
        Scalar ta = (box.min[a] - o) / d;
        Scalar tb = (box.max[a] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return std::nullopt;
    }
    return std::make_pair(t0, t1);
}

}  // namespace luxmix
