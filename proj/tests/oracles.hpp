#pragma once

// Straightforward reference implementations used to cross-check the library.
// They avoid the library's helpers on purpose.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <vector>

namespace rftest {

struct PinholeOracle {
  double fx, fy, cx, cy;
};

// Pull-warps a [D x C x H x W] volume: each target voxel (plane i, row y,
// column x) is lifted at depth depths[i], moved by the inverse of
// (rotation, translation), reprojected and sampled with tent weights summed
// over every source voxel. Coordinates outside [0, extent-1] (with a 1e-9
// tolerance) produce zero.
inline std::vector<double> warp_oracle(const std::vector<double>& src, std::size_t d,
                                       std::size_t c, std::size_t h, std::size_t w,
                                       const Eigen::Matrix3d& rotation,
                                       const Eigen::Vector3d& translation,
                                       const PinholeOracle& cam,
                                       const std::vector<double>& depths) {
  const double spacing = (depths.back() - depths.front()) / static_cast<double>(d - 1);
  std::vector<double> out(src.size(), 0.0);
  const Eigen::Matrix3d rt = rotation.transpose();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double z = depths[i];
        const Eigen::Vector3d target((x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z);
        const Eigen::Vector3d source = rt * (target - translation);
        if (source.z() <= 0.0) continue;
        const double pu = cam.fx * source.x() / source.z() + cam.cx;
        const double pv = cam.fy * source.y() / source.z() + cam.cy;
        const double pi = (source.z() - depths.front()) / spacing;
        const double tol = 1e-9;
        if (pi < -tol || pi > d - 1 + tol || pv < -tol || pv > h - 1 + tol || pu < -tol ||
            pu > w - 1 + tol) {
          continue;
        }
        for (std::size_t si = 0; si < d; ++si) {
          const double wi = std::max(0.0, 1.0 - std::fabs(pi - si));
          if (wi == 0.0) continue;
          for (std::size_t sy = 0; sy < h; ++sy) {
            const double wy = std::max(0.0, 1.0 - std::fabs(pv - sy));
            if (wy == 0.0) continue;
            for (std::size_t sx = 0; sx < w; ++sx) {
              const double wx = std::max(0.0, 1.0 - std::fabs(pu - sx));
              if (wx == 0.0) continue;
              for (std::size_t ch = 0; ch < c; ++ch) {
                out[((i * c + ch) * h + y) * w + x] +=
                    wi * wy * wx * src[((si * c + ch) * h + sy) * w + sx];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// softmax((q Wq)(k Wk)^T / sqrt(C)) (v Wv) Wo, tokens as rows.
inline Eigen::MatrixXd attention_oracle(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                                        const Eigen::MatrixXd& v, const Eigen::MatrixXd& wq,
                                        const Eigen::MatrixXd& wk, const Eigen::MatrixXd& wv,
                                        const Eigen::MatrixXd& wo) {
  Eigen::MatrixXd scores = (q * wq) * (k * wk).transpose() / std::sqrt(double(wq.rows()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double m = scores.row(r).maxCoeff();
    scores.row(r) = (scores.row(r).array() - m).exp().matrix();
    scores.row(r) /= scores.row(r).sum();
  }
  return scores * (v * wv) * wo;
}

}  // namespace rftest
