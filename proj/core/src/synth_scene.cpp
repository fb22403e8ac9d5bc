#include "rayfusion/synth_scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "json_fields.hpp"
#include "rayfusion/errors.hpp"

namespace rayfusion {

namespace {

using detail::Json;

constexpr double kMinHitDistance = 1e-9;

struct Hit {
  double t;
  Eigen::Vector3d normal;
  const Primitive* primitive;
};

std::optional<Hit> intersect_box(const Primitive& box, const Eigen::Vector3d& origin,
                                 const Eigen::Vector3d& dir) {
  const Eigen::Vector3d lo = box.center - box.half_extents;
  const Eigen::Vector3d hi = box.center + box.half_extents;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  int far_axis = -1;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
      continue;
    }
    double t0 = (lo[a] - origin[a]) / dir[a];
    double t1 = (hi[a] - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      near_axis = a;
    }
    if (t1 < t_far) {
      t_far = t1;
      far_axis = a;
    }
  }
  if (t_near > t_far || t_far <= kMinHitDistance) return std::nullopt;
  const bool from_outside = t_near > kMinHitDistance;
  const int axis = from_outside ? near_axis : far_axis;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  normal[axis] = dir[axis] > 0.0 ? -1.0 : 1.0;
  if (!from_outside) normal = -normal;
  return Hit{from_outside ? t_near : t_far, normal, &box};
}

std::optional<Hit> intersect_sphere(const Primitive& sphere, const Eigen::Vector3d& origin,
                                    const Eigen::Vector3d& dir) {
  const Eigen::Vector3d oc = origin - sphere.center;
  const double a = dir.squaredNorm();
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - sphere.radius * sphere.radius;
  const double disc = b * b - a * c;
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  double t = (-b - root) / a;
  if (t <= kMinHitDistance) t = (-b + root) / a;
  if (t <= kMinHitDistance) return std::nullopt;
  return Hit{t, (origin + t * dir - sphere.center) / sphere.radius, &sphere};
}

Eigen::Vector3d shade(const SceneSpec& spec, const Hit& hit, const Eigen::Vector3d& point) {
  const Primitive& p = *hit.primitive;
  const Eigen::Vector3d cell = (point / p.checker_scale).array().floor();
  const long parity = static_cast<long>(cell.x()) + static_cast<long>(cell.y()) +
                      static_cast<long>(cell.z());
  const Eigen::Vector3d& albedo = (parity % 2 == 0) ? p.color_a : p.color_b;
  const Eigen::Vector3d to_light = -spec.light_direction.normalized();
  const double lambert = std::max(0.0, hit.normal.dot(to_light));
  const double intensity = spec.ambient + (1.0 - spec.ambient) * lambert;
  return (albedo * intensity).cwiseMax(0.0).cwiseMin(1.0);
}

Json vec_json(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

void read_vec(const Json& j, const std::string& path, std::string_view key, Eigen::Vector3d& out) {
  const auto it = j.find(std::string(key));
  if (it == j.end()) return;
  if (!it->is_array() || it->size() != 3) {
    throw ConfigError("'" + detail::key_path(path, key) + "': expected an array of 3 numbers");
  }
  for (int i = 0; i < 3; ++i) {
    if (!(*it)[i].is_number()) {
      throw ConfigError("'" + detail::key_path(path, key) + "': expected an array of 3 numbers");
    }
    out[i] = (*it)[i].get<double>();
  }
}

const char* kind_name(Primitive::Kind kind) {
  return kind == Primitive::Kind::kBox ? "box" : "sphere";
}

const char* trajectory_name(TrajectoryKind kind) {
  switch (kind) {
    case TrajectoryKind::kOrbit:
      return "orbit";
    case TrajectoryKind::kDolly:
      return "dolly";
    case TrajectoryKind::kLateral:
      break;
  }
  return "lateral";
}

std::string frame_name(const char* stem, std::size_t index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", stem, index, ext);
  return buf;
}

}  // namespace

void SceneSpec::validate() const {
  if (primitives.empty()) throw ParameterError("scene: no primitives");
  if (trajectory.frame_count == 0) throw ParameterError("scene: frame count must be positive");
  if (!(ambient >= 0.0 && ambient <= 1.0)) throw ParameterError("scene: ambient must lie in [0, 1]");
  if (light_direction.norm() == 0.0) throw ParameterError("scene: light direction is zero");
  for (std::size_t i = 0; i < primitives.size(); ++i) {
    const Primitive& p = primitives[i];
    const Eigen::Vector3d reach = p.kind == Primitive::Kind::kBox
                                      ? p.half_extents
                                      : Eigen::Vector3d::Constant(p.radius);
    const std::string name = "scene: primitive " + std::to_string(i);
    if ((reach.array() <= 0.0).any()) throw ParameterError(name + " has non-positive size");
    if (!(p.checker_scale > 0.0)) throw ParameterError(name + " has non-positive checker scale");
    if (((p.center - reach).array() < room_min.array()).any() ||
        ((p.center + reach).array() > room_max.array()).any()) {
      throw ParameterError(name + " leaves the room bounds");
    }
  }
}

SceneSpec default_scene(std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto colour = [&] { return Eigen::Vector3d(range(0.2, 1.0), range(0.2, 1.0), range(0.2, 1.0)); };

  Primitive wall;
  wall.center = {0.0, 0.0, 5.0};
  wall.half_extents = {4.4, 3.4, 0.1};
  wall.color_a = {0.85, 0.8, 0.7};
  wall.color_b = {0.35, 0.3, 0.3};
  wall.checker_scale = 0.4;
  spec.primitives.push_back(wall);

  for (int i = 0; i < 3; ++i) {
    Primitive box;
    box.center = {range(-1.2, 1.2), range(-0.8, 0.8), range(2.0, 4.0)};
    box.half_extents = {range(0.2, 0.5), range(0.2, 0.5), range(0.2, 0.5)};
    box.color_a = colour();
    box.color_b = 0.3 * colour();
    box.checker_scale = range(0.08, 0.2);
    spec.primitives.push_back(box);
  }
  for (int i = 0; i < 2; ++i) {
    Primitive sphere;
    sphere.kind = Primitive::Kind::kSphere;
    sphere.center = {range(-1.2, 1.2), range(-0.8, 0.8), range(1.5, 3.5)};
    sphere.radius = range(0.2, 0.45);
    sphere.color_a = colour();
    sphere.color_b = 0.3 * colour();
    sphere.checker_scale = range(0.08, 0.2);
    spec.primitives.push_back(sphere);
  }
  return spec;
}

CameraIntrinsics default_intrinsics(std::size_t width, std::size_t height) {
  const double f = 0.75 * static_cast<double>(width);
  return {f, f, static_cast<double>(width) / 2.0, static_cast<double>(height) / 2.0, width, height};
}

std::string scene_to_json(const SceneSpec& spec) {
  Json prims = Json::array();
  for (const Primitive& p : spec.primitives) {
    Json j;
    j["kind"] = kind_name(p.kind);
    j["center"] = vec_json(p.center);
    if (p.kind == Primitive::Kind::kBox) {
      j["half_extents"] = vec_json(p.half_extents);
    } else {
      j["radius"] = p.radius;
    }
    j["color_a"] = vec_json(p.color_a);
    j["color_b"] = vec_json(p.color_b);
    j["checker_scale"] = p.checker_scale;
    prims.push_back(std::move(j));
  }
  Json doc;
  doc["seed"] = spec.seed;
  doc["primitives"] = std::move(prims);
  doc["room_bounds"] = {{"min", vec_json(spec.room_min)}, {"max", vec_json(spec.room_max)}};
  doc["trajectory"] = {{"kind", trajectory_name(spec.trajectory.kind)},
                       {"frame_count", spec.trajectory.frame_count},
                       {"step", spec.trajectory.step},
                       {"pivot", vec_json(spec.trajectory.pivot)}};
  doc["light_direction"] = vec_json(spec.light_direction);
  doc["ambient"] = spec.ambient;
  return doc.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("scene: malformed JSON: ") + e.what());
  }
  detail::reject_unknown_keys(
      doc, "", {"seed", "primitives", "room_bounds", "trajectory", "light_direction", "ambient"});
  SceneSpec spec;
  detail::read_field(doc, "", "seed", spec.seed);
  detail::read_field(doc, "", "ambient", spec.ambient);
  read_vec(doc, "", "light_direction", spec.light_direction);
  if (const auto it = doc.find("room_bounds"); it != doc.end()) {
    detail::reject_unknown_keys(*it, "room_bounds", {"min", "max"});
    read_vec(*it, "room_bounds", "min", spec.room_min);
    read_vec(*it, "room_bounds", "max", spec.room_max);
  }
  if (const auto it = doc.find("trajectory"); it != doc.end()) {
    detail::reject_unknown_keys(*it, "trajectory", {"kind", "frame_count", "step", "pivot"});
    std::string kind = trajectory_name(spec.trajectory.kind);
    detail::read_field(*it, "trajectory", "kind", kind);
    if (kind == "orbit") {
      spec.trajectory.kind = TrajectoryKind::kOrbit;
    } else if (kind == "dolly") {
      spec.trajectory.kind = TrajectoryKind::kDolly;
    } else if (kind == "lateral") {
      spec.trajectory.kind = TrajectoryKind::kLateral;
    } else {
      throw ConfigError("'trajectory.kind': expected orbit, dolly or lateral, got '" + kind + "'");
    }
    detail::read_field(*it, "trajectory", "frame_count", spec.trajectory.frame_count);
    detail::read_field(*it, "trajectory", "step", spec.trajectory.step);
    read_vec(*it, "trajectory", "pivot", spec.trajectory.pivot);
  }
  if (const auto it = doc.find("primitives"); it != doc.end()) {
    if (!it->is_array()) throw ConfigError("'primitives': expected an array");
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string path = "primitives[" + std::to_string(i) + "]";
      const Json& j = (*it)[i];
      detail::reject_unknown_keys(j, path, {"kind", "center", "half_extents", "radius", "color_a",
                                            "color_b", "checker_scale"});
      Primitive p;
      std::string kind = "box";
      detail::read_field(j, path, "kind", kind);
      if (kind == "sphere") {
        p.kind = Primitive::Kind::kSphere;
      } else if (kind != "box") {
        throw ConfigError("'" + path + ".kind': expected box or sphere, got '" + kind + "'");
      }
      read_vec(j, path, "center", p.center);
      read_vec(j, path, "half_extents", p.half_extents);
      detail::read_field(j, path, "radius", p.radius);
      read_vec(j, path, "color_a", p.color_a);
      read_vec(j, path, "color_b", p.color_b);
      detail::read_field(j, path, "checker_scale", p.checker_scale);
      spec.primitives.push_back(p);
    }
  }
  spec.validate();
  return spec;
}

SceneSpec read_scene_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scene file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return scene_from_json(text.str());
}

void write_scene_file(const std::filesystem::path& path, const SceneSpec& spec) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << scene_to_json(spec) << '\n';
}

Pose trajectory_pose(const Trajectory& trajectory, std::size_t index) {
  const double s = trajectory.step * static_cast<double>(index);
  Pose pose;
  switch (trajectory.kind) {
    case TrajectoryKind::kLateral:
      pose.translation = {s, 0.0, 0.0};
      break;
    case TrajectoryKind::kDolly:
      pose.translation = {0.0, 0.0, s};
      break;
    case TrajectoryKind::kOrbit: {
      // Swing the start position about the pivot's vertical axis, keeping
      // the pivot at the same spot in the image.
      pose.rotation = axis_angle(Eigen::Vector3d::UnitY(), s);
      pose.translation = trajectory.pivot - pose.rotation * trajectory.pivot;
      break;
    }
  }
  return pose;
}

RenderedFrame render_frame(const SceneSpec& spec, std::size_t frame_index,
                           const CameraIntrinsics& k) {
  k.validate();
  if (frame_index >= spec.trajectory.frame_count) {
    throw ParameterError("render_frame: frame " + std::to_string(frame_index) +
                         " beyond trajectory length " +
                         std::to_string(spec.trajectory.frame_count));
  }
  const Pose pose = trajectory_pose(spec.trajectory, frame_index);
  RenderedFrame frame{RGBImage::filled(k.width, k.height), SparseDepthMap::empty(k.width, k.height),
                      pose};
  for (std::size_t y = 0; y < k.height; ++y) {
    for (std::size_t x = 0; x < k.width; ++x) {
      // Camera-space direction with unit z, so the ray parameter is the depth.
      const Eigen::Vector3d dir_cam((static_cast<double>(x) - k.cx) / k.fx,
                                    (static_cast<double>(y) - k.cy) / k.fy, 1.0);
      const Eigen::Vector3d dir = pose.rotation * dir_cam;
      std::optional<Hit> best;
      for (const Primitive& p : spec.primitives) {
        const auto hit = p.kind == Primitive::Kind::kBox ? intersect_box(p, pose.translation, dir)
                                                         : intersect_sphere(p, pose.translation, dir);
        if (hit && (!best || hit->t < best->t)) best = hit;
      }
      if (!best) continue;
      frame.depth.set(y, x, best->t);
      const Eigen::Vector3d rgb = shade(spec, *best, pose.translation + best->t * dir);
      for (int c = 0; c < 3; ++c) frame.image.at(static_cast<std::size_t>(c), y, x) = rgb[c];
    }
  }
  return frame;
}

SparseDepthMap sample_sparse(const SparseDepthMap& dense, std::size_t count, std::uint64_t seed,
                             bool* clamped) {
  dense.validate();
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < dense.valid.size(); ++i) {
    if (dense.valid[i]) valid.push_back(i);
  }
  if (clamped) *clamped = count > valid.size();
  if (count >= valid.size()) return dense;
  std::vector<std::size_t> chosen;
  chosen.reserve(count);
  std::mt19937_64 rng(seed);
  std::sample(valid.begin(), valid.end(), std::back_inserter(chosen), count, rng);
  SparseDepthMap out = SparseDepthMap::empty(dense.width, dense.height);
  for (std::size_t i : chosen) {
    out.depth[i] = dense.depth[i];
    out.valid[i] = 1;
  }
  return out;
}

std::size_t sparse_count_for_density(std::size_t width, std::size_t height, double density) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw ParameterError("sparse density must lie in (0, 1]");
  }
  const double n = std::round(density * static_cast<double>(width * height));
  return std::max<std::size_t>(1, static_cast<std::size_t>(n));
}

void write_synthetic_sequence(const std::filesystem::path& dir, const SceneSpec& spec,
                              const CameraIntrinsics& k) {
  spec.validate();
  std::filesystem::create_directories(dir);
  std::vector<CameraRecord> cameras;
  for (std::size_t f = 0; f < spec.trajectory.frame_count; ++f) {
    const RenderedFrame frame = render_frame(spec, f, k);
    const std::size_t hits = frame.depth.valid_count();
    if (2 * hits < k.width * k.height) {
      throw ParameterError("scene: frame " + std::to_string(f) + " sees geometry in only " +
                           std::to_string(hits) + " of " + std::to_string(k.width * k.height) +
                           " pixels");
    }
    write_ppm(dir / frame_name("frame", f, "ppm"), frame.image);
    write_depth_pfm(dir / frame_name("frame", f, "pfm"), frame.depth);
    cameras.push_back({frame.pose, k.fx, k.fy, k.cx, k.cy});
  }
  write_camera_file(dir / "poses.txt", cameras);
  write_intrinsics_file(dir / "intrinsics.txt", k);
  write_scene_file(dir / "scene.json", spec);
}

}  // namespace rayfusion
