#include "rayfusion/geometry.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rayfusion/errors.hpp"

namespace rayfusion {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw ParameterError("intrinsics: focal lengths must be positive");
  if (width == 0 || height == 0) throw ParameterError("intrinsics: empty image extents");
  if (!(cx >= 0.0 && cx < static_cast<double>(width) && cy >= 0.0 &&
        cy < static_cast<double>(height))) {
    throw ParameterError("intrinsics: principal point outside the image");
  }
}

CameraIntrinsics CameraIntrinsics::scaled(std::size_t factor) const {
  if (factor == 0 || width % factor || height % factor) {
    throw DimensionError("intrinsics: image " + std::to_string(width) + "x" +
                         std::to_string(height) + " not divisible by " + std::to_string(factor));
  }
  const double f = static_cast<double>(factor);
  return {fx / f, fy / f, cx / f, cy / f, width / factor, height / factor};
}

void Pose::validate() const {
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw ParameterError("pose: rotation is not orthonormal");
  }
  if (std::fabs(rotation.determinant() - 1.0) > 1e-9) {
    throw ParameterError("pose: rotation determinant is not +1");
  }
  if (!translation.allFinite()) throw ParameterError("pose: non-finite translation");
}

Pose Pose::inverse() const {
  Pose out;
  out.rotation = rotation.transpose();
  out.translation = -(out.rotation * translation);
  return out;
}

Pose Pose::operator*(const Pose& rhs) const {
  Pose out;
  out.rotation = rotation * rhs.rotation;
  out.translation = rotation * rhs.translation + translation;
  return out;
}

Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

DepthPlaneSet make_planes(std::size_t count, double d_min, double d_max) {
  if (count < 2) throw ParameterError("make_planes: need at least 2 planes");
  if (!(d_min > 0.0 && d_min < d_max) || !std::isfinite(d_max)) {
    throw ParameterError("make_planes: need 0 < d_min < d_max");
  }
  DepthPlaneSet planes{count, d_min, d_max, {}};
  planes.depths.resize(count);
  const double step = (d_max - d_min) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) planes.depths[i] = d_min + static_cast<double>(i) * step;
  planes.depths.back() = d_max;
  return planes;
}

Eigen::Vector3d backproject(double u, double v, double depth, const CameraIntrinsics& k) {
  if (!(depth > 0.0)) throw ParameterError("backproject: depth must be positive");
  return {(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth};
}

Projection project(const Eigen::Vector3d& point, const CameraIntrinsics& k) {
  if (!(point.z() > 0.0)) throw BehindCameraError("project: point is behind the camera");
  return {k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy, point.z()};
}

Pose relative_pose(const Pose& current, const Pose& previous) {
  Pose rel;
  rel.rotation = current.rotation.transpose() * previous.rotation;
  rel.translation = current.rotation.transpose() * (previous.translation - current.translation);
  return rel;
}

namespace {

// Eight trilinear taps per target cell, shared by every channel.
struct WarpTaps {
  std::array<std::uint32_t, 8> source;  // plane * H * W + row * W + col
  std::array<double, 8> weight;
};

constexpr double kBoundsSlack = 1e-9;

}  // namespace

AlignedVolume align_volume(const Tensor& features, const Pose& previous_to_current,
                           const CameraIntrinsics& k, const DepthPlaneSet& planes) {
  if (features.dim() != 4) {
    throw DimensionError("align_volume: expected [D x C x H x W], got " +
                         shape_string(features.shape()));
  }
  const std::size_t depth_n = features.size(0);
  const std::size_t channels = features.size(1);
  const std::size_t height = features.size(2);
  const std::size_t width = features.size(3);
  if (k.width != width || k.height != height || planes.count != depth_n) {
    throw DimensionError("align_volume: intrinsics " + std::to_string(k.width) + "x" +
                         std::to_string(k.height) + " / planes " + std::to_string(planes.count) +
                         " do not match volume " + shape_string(features.shape()));
  }
  const Pose current_to_previous = previous_to_current.inverse();
  const std::size_t plane_size = height * width;
  const std::size_t cells = depth_n * plane_size;

  std::vector<WarpTaps> taps(cells);
  std::vector<std::uint8_t> valid(cells, 0);
  for (std::size_t i = 0; i < depth_n; ++i) {
    for (std::size_t h = 0; h < height; ++h) {
      for (std::size_t w = 0; w < width; ++w) {
        const std::size_t cell = i * plane_size + h * width + w;
        const Eigen::Vector3d target =
            backproject(static_cast<double>(w), static_cast<double>(h), planes.depths[i], k);
        const Eigen::Vector3d source = current_to_previous.apply(target);
        if (!(source.z() > 0.0)) continue;
        const Projection p = project(source, k);
        const double coords[3] = {planes.fractional_index(p.depth), p.v, p.u};
        const double extents[3] = {static_cast<double>(depth_n - 1),
                                   static_cast<double>(height - 1),
                                   static_cast<double>(width - 1)};
        bool inside = true;
        std::array<std::size_t, 3> lo{};
        std::array<std::size_t, 3> hi{};
        std::array<double, 3> frac{};
        for (int a = 0; a < 3; ++a) {
          if (!(coords[a] >= -kBoundsSlack && coords[a] <= extents[a] + kBoundsSlack)) {
            inside = false;
            break;
          }
          const double c = std::clamp(coords[a], 0.0, extents[a]);
          const double f = std::floor(c);
          lo[a] = static_cast<std::size_t>(f);
          frac[a] = c - f;
          hi[a] = std::min(lo[a] + 1, static_cast<std::size_t>(extents[a]));
        }
        if (!inside) continue;
        valid[cell] = 1;
        WarpTaps& t = taps[cell];
        for (int corner = 0; corner < 8; ++corner) {
          const bool bp = corner & 4, br = corner & 2, bc = corner & 1;
          const std::size_t sp = bp ? hi[0] : lo[0];
          const std::size_t sr = br ? hi[1] : lo[1];
          const std::size_t sc = bc ? hi[2] : lo[2];
          t.source[corner] = static_cast<std::uint32_t>(sp * plane_size + sr * width + sc);
          t.weight[corner] = (bp ? frac[0] : 1.0 - frac[0]) * (br ? frac[1] : 1.0 - frac[1]) *
                             (bc ? frac[2] : 1.0 - frac[2]);
        }
      }
    }
  }

  // Features are [D x C x H x W]; a (plane, row, col) cell maps to
  // plane * C * HW + channel * HW + row * W + col.
  auto feature_offset = [=](std::uint32_t cell, std::size_t c) {
    const std::size_t plane = cell / plane_size;
    const std::size_t pix = cell % plane_size;
    return (plane * channels + c) * plane_size + pix;
  };

  std::vector<double> out(features.numel(), 0.0);
  auto src = features.data();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (!valid[cell]) continue;
    const std::size_t plane = cell / plane_size;
    const std::size_t pix = cell % plane_size;
    const WarpTaps& t = taps[cell];
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (int corner = 0; corner < 8; ++corner) {
        acc += t.weight[corner] * src[feature_offset(t.source[corner], c)];
      }
      out[(plane * channels + c) * plane_size + pix] = acc;
    }
  }

  AlignedVolume result;
  result.valid = valid;
  result.features = detail::make_result(
      features.shape(), std::move(out), {features},
      [taps = std::move(taps), valid = std::move(valid), channels, plane_size, feature_offset](
          const detail::Node& self, detail::ParentGrads& g) {
        for (std::size_t cell = 0; cell < taps.size(); ++cell) {
          if (!valid[cell]) continue;
          const std::size_t plane = cell / plane_size;
          const std::size_t pix = cell % plane_size;
          const WarpTaps& t = taps[cell];
          for (std::size_t c = 0; c < channels; ++c) {
            const double gy = self.grad[(plane * channels + c) * plane_size + pix];
            for (int corner = 0; corner < 8; ++corner) {
              g[0][feature_offset(t.source[corner], c)] += t.weight[corner] * gy;
            }
          }
        }
      });
  return result;
}

std::vector<CameraRecord> read_camera_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open camera file " + path.string());
  std::vector<CameraRecord> cameras;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::array<double, 16> v{};
    for (double& x : v) {
      if (!(fields >> x)) {
        throw IoError(path.string() + ":" + std::to_string(line_no) +
                      ": expected 16 values (12 pose + 4 intrinsics)");
      }
    }
    CameraRecord rec;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rec.pose.rotation(r, c) = v[r * 3 + c];
    }
    rec.pose.translation = {v[9], v[10], v[11]};
    rec.fx = v[12];
    rec.fy = v[13];
    rec.cx = v[14];
    rec.cy = v[15];
    cameras.push_back(rec);
  }
  return cameras;
}

void write_camera_file(const std::filesystem::path& path, const std::vector<CameraRecord>& cameras) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write camera file " + path.string());
  out << std::setprecision(17);
  for (const auto& cam : cameras) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << cam.pose.rotation(r, c) << ' ';
    }
    out << cam.pose.translation.x() << ' ' << cam.pose.translation.y() << ' '
        << cam.pose.translation.z() << ' ' << cam.fx << ' ' << cam.fy << ' ' << cam.cx << ' '
        << cam.cy << '\n';
  }
}

CameraIntrinsics read_intrinsics_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open intrinsics file " + path.string());
  CameraIntrinsics k;
  if (!(in >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height)) {
    throw IoError(path.string() + ": expected 'fx fy cx cy width height'");
  }
  k.validate();
  return k;
}

void write_intrinsics_file(const std::filesystem::path& path, const CameraIntrinsics& k) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write intrinsics file " + path.string());
  out << std::setprecision(17) << k.fx << ' ' << k.fy << ' ' << k.cx << ' ' << k.cy << ' '
      << k.width << ' ' << k.height << '\n';
}

}  // namespace rayfusion
