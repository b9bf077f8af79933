#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

// Camera conventions: poses are camera-to-world (x_world = R·x_cam + t). The
// camera looks down +z with image x to the right and image y downward. Pixel
// centers sit at integer coordinates; depth is the camera-frame z coordinate.

namespace stream4d {

/// Camera pose plus field of view: 3 + 4 + 2 = 9 parameters.
/// Quaternion stored as (x, y, z, w), unit norm, w ≥ 0.
struct CameraPose {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Vector4d quat{0.0, 0.0, 0.0, 1.0};
  Eigen::Vector2d fov{1.0, 1.0};  // horizontal, vertical (radians)

  static constexpr std::size_t kDims = 9;

  static CameraPose identity(Eigen::Vector2d fov = {1.0, 1.0}) {
    CameraPose p;
    p.fov = fov;
    return p;
  }

  Eigen::Quaterniond rotation() const { return Eigen::Quaterniond(quat[3], quat[0], quat[1], quat[2]); }
  Eigen::Matrix3d rotation_matrix() const { return rotation().toRotationMatrix(); }

  void set_rotation(const Eigen::Quaterniond& q) {
    quat = {q.x(), q.y(), q.z(), q.w()};
    canonicalize();
  }

  /// Normalizes the quaternion and flips it into the w ≥ 0 hemisphere.
  void canonicalize() {
    const double n = quat.norm();
    if (n > 0) quat /= n;
    if (quat[3] < 0) quat = -quat;
  }

  std::array<double, kDims> to_array() const {
    return {translation[0], translation[1], translation[2], quat[0], quat[1], quat[2], quat[3], fov[0], fov[1]};
  }

  template <class It>
  static CameraPose from_array(It first) {
    CameraPose p;
    for (int i = 0; i < 3; ++i) p.translation[i] = static_cast<double>(*first++);
    for (int i = 0; i < 4; ++i) p.quat[i] = static_cast<double>(*first++);
    for (int i = 0; i < 2; ++i) p.fov[i] = static_cast<double>(*first++);
    p.canonicalize();
    return p;
  }

  /// Maps world points into this camera's frame.
  Eigen::Vector3d world_to_camera(const Eigen::Vector3d& x) const {
    return rotation_matrix().transpose() * (x - translation);
  }
  Eigen::Vector3d camera_to_world(const Eigen::Vector3d& x) const { return rotation_matrix() * x + translation; }

  /// Pose of `other` expressed relative to this camera: this⁻¹ ∘ other.
  CameraPose relative(const CameraPose& other) const {
    CameraPose r;
    const Eigen::Matrix3d rt = rotation_matrix().transpose();
    r.translation = rt * (other.translation - translation);
    r.set_rotation(Eigen::Quaterniond(rt * other.rotation_matrix()));
    r.fov = other.fov;
    return r;
  }

  bool valid() const {
    return std::abs(quat.norm() - 1.0) <= 1e-6 && quat[3] >= 0 && fov[0] > 0 && fov[0] < std::numbers::pi &&
           fov[1] > 0 && fov[1] < std::numbers::pi;
  }
};

/// Pinhole intrinsics derived from the field of view of a W×H image.
struct Intrinsics {
  double fx, fy, cx, cy;

  static Intrinsics from_fov(const Eigen::Vector2d& fov, std::size_t width, std::size_t height) {
    if (!(fov[0] > 0 && fov[0] < std::numbers::pi && fov[1] > 0 && fov[1] < std::numbers::pi))
      throw std::invalid_argument("Intrinsics: field of view outside (0, pi)");
    return {0.5 * static_cast<double>(width) / std::tan(0.5 * fov[0]),
            0.5 * static_cast<double>(height) / std::tan(0.5 * fov[1]), 0.5 * (static_cast<double>(width) - 1.0),
            0.5 * (static_cast<double>(height) - 1.0)};
  }

  /// Camera-frame ray through pixel (u, v) with z = 1.
  Eigen::Vector3d ray(double u, double v) const { return {(u - cx) / fx, (v - cy) / fy, 1.0}; }
  Eigen::Vector2d project(const Eigen::Vector3d& xc) const { return {fx * xc.x() / xc.z() + cx, fy * xc.y() / xc.z() + cy}; }
};

/// World point seen at pixel (u, v) with depth `d` from camera `pose`.
inline Eigen::Vector3d unproject_pixel(double u, double v, double d, const CameraPose& pose, const Intrinsics& k) {
  return pose.camera_to_world(k.ray(u, v) * d);
}

/// Pixel coordinates and depth of a world point in camera `pose`.
inline Eigen::Vector3d project_point(const Eigen::Vector3d& xw, const CameraPose& pose, const Intrinsics& k) {
  const Eigen::Vector3d xc = pose.world_to_camera(xw);
  const Eigen::Vector2d uv = k.project(xc);
  return {uv.x(), uv.y(), xc.z()};
}

/// Rotation angle between two rotations, in degrees.
inline double rotation_angle_deg(const Eigen::Quaterniond& a, const Eigen::Quaterniond& b) {
  const double d = std::min(1.0, std::abs(a.normalized().dot(b.normalized())));
  return 2.0 * std::acos(d) * 180.0 / std::numbers::pi;
}

}  // namespace stream4d
