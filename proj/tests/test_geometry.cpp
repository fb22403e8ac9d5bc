#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "rayfusion/errors.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/ops.hpp"
#include "test_util.hpp"

using namespace rayfusion;

namespace {

CameraIntrinsics small_camera(std::size_t w = 6, std::size_t h = 6) {
  CameraIntrinsics k;
  k.fx = 0.75 * static_cast<double>(w);
  k.fy = 0.75 * static_cast<double>(w);
  k.cx = 0.5 * static_cast<double>(w);
  k.cy = 0.5 * static_cast<double>(h);
  k.width = w;
  k.height = h;
  return k;
}

Pose random_small_pose(std::mt19937_64& rng, double max_angle, double max_shift) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Eigen::Vector3d axis(unit(rng), unit(rng), unit(rng));
  if (axis.norm() < 1e-3) axis = Eigen::Vector3d::UnitY();
  Pose p;
  p.rotation = axis_angle(axis.normalized(), max_angle * unit(rng));
  p.translation = max_shift * Eigen::Vector3d(unit(rng), unit(rng), unit(rng));
  return p;
}

}  // namespace

TEST(Camera, BackprojectThenProjectRoundTrips) {
  const CameraIntrinsics k = small_camera(64, 48);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 63.0), v(0.0, 47.0), z(0.1, 20.0);
  for (int i = 0; i < 200; ++i) {
    const double uu = u(rng), vv = v(rng), zz = z(rng);
    const Projection p = project(backproject(uu, vv, zz, k), k);
    EXPECT_NEAR(p.u, uu, 1e-9);
    EXPECT_NEAR(p.v, vv, 1e-9);
    EXPECT_NEAR(p.depth, zz, 1e-12);
  }
}

TEST(Camera, PrincipalPointLiesOnOpticalAxis) {
  const CameraIntrinsics k = small_camera(64, 48);
  const Eigen::Vector3d p = backproject(k.cx, k.cy, 2.5, k);
  EXPECT_DOUBLE_EQ(p.x(), 0.0);
  EXPECT_DOUBLE_EQ(p.y(), 0.0);
  EXPECT_DOUBLE_EQ(p.z(), 2.5);
}

TEST(Camera, ProjectBehindCameraThrows) {
  EXPECT_THROW(project({0.0, 0.0, -1.0}, small_camera()), BehindCameraError);
  EXPECT_THROW(project({0.0, 0.0, 0.0}, small_camera()), BehindCameraError);
}

TEST(Camera, ScaledDividesIntrinsics) {
  CameraIntrinsics k;
  k.fx = 8;
  k.fy = 6;
  k.cx = 4;
  k.cy = 3;
  k.width = 16;
  k.height = 12;
  const CameraIntrinsics s = k.scaled(2);
  EXPECT_DOUBLE_EQ(s.fx, 4);
  EXPECT_DOUBLE_EQ(s.fy, 3);
  EXPECT_DOUBLE_EQ(s.cx, 2);
  EXPECT_DOUBLE_EQ(s.cy, 1.5);
  EXPECT_EQ(s.width, 8u);
  EXPECT_EQ(s.height, 6u);
  EXPECT_THROW(k.scaled(5), DimensionError);
}

TEST(Camera, InvalidIntrinsicsRejected) {
  CameraIntrinsics k = small_camera();
  k.fx = 0.0;
  EXPECT_THROW(k.validate(), ParameterError);
}

TEST(Pose, InverseComposesToIdentity) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    const Pose p = random_small_pose(rng, 1.0, 2.0);
    const Pose id = p * p.inverse();
    EXPECT_LT((id.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
    EXPECT_LT(id.translation.norm(), 1e-12);
  }
}

TEST(Pose, RelativePoseMapsPreviousCameraPointsIntoCurrent) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 20; ++i) {
    const Pose current = random_small_pose(rng, 0.5, 1.0);
    const Pose previous = random_small_pose(rng, 0.5, 1.0);
    const Pose rel = relative_pose(current, previous);
    const Eigen::Vector3d p_prev(0.3, -0.2, 2.0);
    const Eigen::Vector3d world = previous.apply(p_prev);
    const Eigen::Vector3d expected = current.inverse().apply(world);
    EXPECT_LT((rel.apply(p_prev) - expected).norm(), 1e-12);
  }
  const Pose same = random_small_pose(rng, 0.5, 1.0);
  const Pose rel = relative_pose(same, same);
  EXPECT_LT((rel.rotation - Eigen::Matrix3d::Identity()).norm(), 1e-12);
  EXPECT_LT(rel.translation.norm(), 1e-12);
}

TEST(Pose, NonOrthonormalRotationRejected) {
  Pose p;
  p.rotation(0, 0) = 2.0;
  EXPECT_THROW(p.validate(), ParameterError);
  Pose mirror;
  mirror.rotation(2, 2) = -1.0;
  EXPECT_THROW(mirror.validate(), ParameterError);
}

TEST(Planes, UniformSpacingAndFractionalIndex) {
  const DepthPlaneSet planes = make_planes(5, 1.0, 3.0);
  EXPECT_EQ(planes.depths, (std::vector<double>{1.0, 1.5, 2.0, 2.5, 3.0}));
  EXPECT_DOUBLE_EQ(planes.fractional_index(2.25), 2.5);
  EXPECT_THROW(make_planes(1, 1.0, 2.0), ParameterError);
  EXPECT_THROW(make_planes(4, 2.0, 1.0), ParameterError);
  EXPECT_THROW(make_planes(4, 0.0, 1.0), ParameterError);
}

TEST(AlignVolume, IdentityPoseIsIdentity) {
  std::mt19937_64 rng(5);
  const CameraIntrinsics k = small_camera();
  const DepthPlaneSet planes = make_planes(4, 1.0, 4.0);
  const Tensor x = rftest::random_tensor({4, 3, 6, 6}, rng);
  const AlignedVolume out = align_volume(x, Pose::identity(), k, planes);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out.features.data()[i], x.data()[i], 1e-12);
  for (auto v : out.valid) EXPECT_EQ(v, 1);
}

TEST(AlignVolume, IsLinearInFeatures) {
  std::mt19937_64 rng(6);
  const CameraIntrinsics k = small_camera();
  const DepthPlaneSet planes = make_planes(4, 1.0, 4.0);
  for (int trial = 0; trial < 5; ++trial) {
    const Pose pose = random_small_pose(rng, 0.1, 0.2);
    const Tensor a = rftest::random_tensor({4, 2, 6, 6}, rng);
    const Tensor b = rftest::random_tensor({4, 2, 6, 6}, rng);
    const double alpha = 0.7, beta = -1.3;
    const Tensor mix = ops::add(ops::mul_scalar(a, alpha), ops::mul_scalar(b, beta));
    const Tensor ta = align_volume(a, pose, k, planes).features;
    const Tensor tb = align_volume(b, pose, k, planes).features;
    const Tensor tm = align_volume(mix, pose, k, planes).features;
    const auto wa = ta.data(), wb = tb.data(), wm = tm.data();
    for (std::size_t i = 0; i < wm.size(); ++i) {
      EXPECT_NEAR(wm[i], alpha * wa[i] + beta * wb[i], 1e-9);
    }
  }
}

TEST(AlignVolume, MatchesBruteForceTrilinearOracle) {
  std::mt19937_64 rng(7);
  const CameraIntrinsics k = small_camera();
  const DepthPlaneSet planes = make_planes(4, 1.0, 4.0);
  const rftest::PinholeOracle cam{k.fx, k.fy, k.cx, k.cy};
  for (int trial = 0; trial < 20; ++trial) {
    const Pose pose = random_small_pose(rng, 0.08, 0.15);
    const Tensor x = rftest::random_tensor({4, 2, 6, 6}, rng);
    const Tensor warped = align_volume(x, pose, k, planes).features;
    const auto got = warped.data();
    const auto expected = rftest::warp_oracle(rftest::values(x), 4, 2, 6, 6, pose.rotation,
                                              pose.translation, cam, planes.depths);
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-9);
  }
}

TEST(AlignVolume, OutOfFrustumSamplesAreZeroAndInvalid) {
  const CameraIntrinsics k = small_camera();
  const DepthPlaneSet planes = make_planes(4, 1.0, 4.0);
  Pose shift;
  shift.translation = Eigen::Vector3d(100.0, 0.0, 0.0);
  const AlignedVolume out = align_volume(Tensor::full({4, 1, 6, 6}, 1.0), shift, k, planes);
  for (double v : out.features.data()) EXPECT_EQ(v, 0.0);
  for (auto v : out.valid) EXPECT_EQ(v, 0);
}

TEST(AlignVolume, TranslationAlongAxisShiftsPlanes) {
  // Moving the camera forward by one plane spacing: target plane i reads source plane i+1.
  const CameraIntrinsics k = small_camera();
  const DepthPlaneSet planes = make_planes(4, 1.0, 4.0);
  std::vector<double> v(4 * 36);
  for (std::size_t i = 0; i < 4; ++i) std::fill_n(v.begin() + i * 36, 36, double(i));
  Pose forward;  // previous-to-current; the current camera sits 1 m ahead
  forward.translation = Eigen::Vector3d(0.0, 0.0, -1.0);
  const AlignedVolume out =
      align_volume(Tensor::from_data({4, 1, 6, 6}, v), forward, k, planes);
  const std::size_t centre = 3 * 6 + 3;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(out.valid[i * 36 + centre]);
    EXPECT_NEAR(out.features.data()[i * 36 + centre], double(i + 1), 1e-12);
  }
  EXPECT_FALSE(out.valid[3 * 36 + centre]);
}

TEST(AlignVolume, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const CameraIntrinsics k = small_camera(4, 4);
  const DepthPlaneSet planes = make_planes(3, 1.0, 3.0);
  const Pose pose = random_small_pose(rng, 0.1, 0.1);
  const Tensor probe_w = rftest::random_tensor({3, 2, 4, 4}, rng);
  ParameterStore p;
  p.add("x", rftest::random_tensor({3, 2, 4, 4}, rng));
  const auto r = gradient_check(
      [&](const ParameterStore& s) {
        return ops::sum(ops::mul(align_volume(s.at("x"), pose, k, planes).features, probe_w));
      },
      p);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(AlignVolume, ShapeMismatchThrows) {
  EXPECT_THROW(align_volume(Tensor::zeros({4, 1, 6, 5}), Pose::identity(), small_camera(),
                            make_planes(4, 1.0, 4.0)),
               DimensionError);
  EXPECT_THROW(align_volume(Tensor::zeros({3, 1, 6, 6}), Pose::identity(), small_camera(),
                            make_planes(4, 1.0, 4.0)),
               DimensionError);
}

TEST(CameraFiles, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "rayfusion_camera_test";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(9);
  std::vector<CameraRecord> cams;
  for (int i = 0; i < 3; ++i) cams.push_back({random_small_pose(rng, 0.5, 1.0), 10, 11, 5, 4});
  write_camera_file(dir / "poses.txt", cams);
  const auto back = read_camera_file(dir / "poses.txt");
  ASSERT_EQ(back.size(), cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    EXPECT_LT((back[i].pose.rotation - cams[i].pose.rotation).norm(), 1e-12);
    EXPECT_LT((back[i].pose.translation - cams[i].pose.translation).norm(), 1e-12);
    EXPECT_EQ(back[i].fy, 11);
  }
  const CameraIntrinsics k = small_camera(64, 48);
  write_intrinsics_file(dir / "intrinsics.txt", k);
  const CameraIntrinsics kb = read_intrinsics_file(dir / "intrinsics.txt");
  EXPECT_DOUBLE_EQ(kb.fx, k.fx);
  EXPECT_EQ(kb.width, 64u);
  EXPECT_EQ(kb.height, 48u);
  std::filesystem::remove_all(dir);
}
