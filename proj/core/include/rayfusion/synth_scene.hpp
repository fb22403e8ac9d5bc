#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/image.hpp"

namespace rayfusion {

struct Primitive {
  enum class Kind { kBox, kSphere };

  Kind kind = Kind::kBox;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extents = Eigen::Vector3d::Constant(0.5);  // boxes
  double radius = 0.5;                                            // spheres
  Eigen::Vector3d color_a = Eigen::Vector3d::Constant(0.9);
  Eigen::Vector3d color_b = Eigen::Vector3d::Constant(0.2);
  double checker_scale = 0.1;  // checker cell edge, meters
};

enum class TrajectoryKind { kOrbit, kDolly, kLateral };

struct Trajectory {
  TrajectoryKind kind = TrajectoryKind::kLateral;
  std::size_t frame_count = 8;
  // Per-frame step: meters for dolly/lateral, radians for orbit.
  double step = 0.05;
  // Orbit pivot in world coordinates.
  Eigen::Vector3d pivot{0.0, 0.0, 3.0};
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  Eigen::Vector3d room_min{-4.5, -3.5, 0.0};
  Eigen::Vector3d room_max{4.5, 3.5, 6.0};
  Trajectory trajectory;
  // Direction the light travels (towards the scene).
  Eigen::Vector3d light_direction{-0.3, 0.5, 1.0};
  double ambient = 0.3;

  void validate() const;
};

// Three boxes and two spheres placed from `seed` in front of a backdrop wall,
// viewed along +z by a camera starting at the world origin.
SceneSpec default_scene(std::uint64_t seed);

// Desk-scale camera for the default scene: 64 x 48 pixels.
CameraIntrinsics default_intrinsics(std::size_t width = 64, std::size_t height = 48);

std::string scene_to_json(const SceneSpec& spec);
// Unknown keys raise ConfigError naming the key path.
SceneSpec scene_from_json(const std::string& text);
SceneSpec read_scene_file(const std::filesystem::path& path);
void write_scene_file(const std::filesystem::path& path, const SceneSpec& spec);

// World-from-camera pose of frame `index` on the scene trajectory.
Pose trajectory_pose(const Trajectory& trajectory, std::size_t index);

struct RenderedFrame {
  RGBImage image;
  SparseDepthMap depth;  // dense; background pixels invalid
  Pose pose;
};

// Casts one ray per pixel centre (u, v) = (x, y); depth is the camera-space z
// of the nearest hit, colour a checker albedo under Lambert shading.
RenderedFrame render_frame(const SceneSpec& spec, std::size_t frame_index,
                           const CameraIntrinsics& k);

// Uniform subset of `count` valid pixels without replacement. Asking for more
// than are available keeps every valid pixel and sets *clamped.
SparseDepthMap sample_sparse(const SparseDepthMap& dense, std::size_t count, std::uint64_t seed,
                             bool* clamped = nullptr);

// max(1, round(density * width * height)).
std::size_t sparse_count_for_density(std::size_t width, std::size_t height, double density);

// Writes frame_%04d.ppm, frame_%04d.pfm (dense ground truth), poses.txt,
// intrinsics.txt and scene.json into `dir`. Throws ParameterError if a frame
// sees geometry in fewer than half of its pixels.
void write_synthetic_sequence(const std::filesystem::path& dir, const SceneSpec& spec,
                              const CameraIntrinsics& k);

}  // namespace rayfusion
