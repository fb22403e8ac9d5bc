#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rayfusion/tensor.hpp"

namespace rayfusion {

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t width = 1;
  std::size_t height = 1;

  void validate() const;
  // Divides focal lengths, principal point and extents by `factor`.
  CameraIntrinsics scaled(std::size_t factor) const;
};

// Rigid transform. Camera poses are world-from-camera: x_world = R x_cam + t.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }
  void validate() const;
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
};

// Rotation by `angle` radians about a (normalized) axis.
Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle);

struct DepthPlaneSet {
  std::size_t count = 0;
  double d_min = 0.0;
  double d_max = 0.0;
  std::vector<double> depths;

  double spacing() const { return (d_max - d_min) / static_cast<double>(count - 1); }
  // Continuous plane coordinate of depth z under uniform spacing.
  double fractional_index(double z) const { return (z - d_min) / spacing(); }
};

DepthPlaneSet make_planes(std::size_t count, double d_min, double d_max);

Eigen::Vector3d backproject(double u, double v, double depth, const CameraIntrinsics& k);

struct Projection {
  double u;
  double v;
  double depth;
};

Projection project(const Eigen::Vector3d& point, const CameraIntrinsics& k);

// Transform taking previous-camera coordinates into current-camera
// coordinates: R = Rc^T Rp, t = Rc^T (tp - tc).
Pose relative_pose(const Pose& current, const Pose& previous);

struct AlignedVolume {
  Tensor features;                 // [D x C x H x W]
  std::vector<std::uint8_t> valid;  // [D x H x W]
};

// Pulls a [D x C x H x W] volume from viewpoint t-1 into the frustum of
// viewpoint t. `previous_to_current` maps t-1 camera coordinates into t
// camera coordinates (see relative_pose); every target voxel is sent back
// through its inverse and trilinearly sampled in (plane, row, column).
// Samples outside the source frustum are zero and flagged invalid.
// Differentiable with respect to `features`.
AlignedVolume align_volume(const Tensor& features, const Pose& previous_to_current,
                           const CameraIntrinsics& k, const DepthPlaneSet& planes);

// One camera per line: 12 pose values (row-major R, then t) followed by
// fx fy cx cy, whitespace separated.
struct CameraRecord {
  Pose pose;
  double fx, fy, cx, cy;
};

std::vector<CameraRecord> read_camera_file(const std::filesystem::path& path);
void write_camera_file(const std::filesystem::path& path, const std::vector<CameraRecord>& cameras);

// intrinsics.txt: "fx fy cx cy width height" on a single line.
CameraIntrinsics read_intrinsics_file(const std::filesystem::path& path);
void write_intrinsics_file(const std::filesystem::path& path, const CameraIntrinsics& k);

}  // namespace rayfusion
