#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/image.hpp"
#include "rayfusion/parameters.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

// D x C x H' x W' features on hypothesis planes spanning one camera frustum.
struct CostVolume {
  DepthPlaneSet planes;
  Tensor features;
  // D x H' x W' flags, filled in by alignment; empty means all valid.
  std::vector<std::uint8_t> validity;

  std::size_t depth_count() const { return features.size(0); }
  std::size_t channels() const { return features.size(1); }
  std::size_t height() const { return features.size(2); }
  std::size_t width() const { return features.size(3); }
};

CostVolume align_volume(const CostVolume& volume, const Pose& previous_to_current,
                        const CameraIntrinsics& k);

// One-hot column at the plane nearest to each valid sample (ties go to the
// lower index). Returns [D x 1 x H x W].
Tensor build_occupancy_volume(const SparseDepthMap& sparse, const DepthPlaneSet& planes);

// (s - d_i) / (d_max - d_min) at valid samples, zero elsewhere. [D x 1 x H x W]
Tensor build_residual_volume(const SparseDepthMap& sparse, const DepthPlaneSet& planes);

struct ImageEncoderConfig {
  std::size_t channels = 12;  // C_img, split across three scales
  std::size_t downscale = 4;

  std::array<std::size_t, 3> level_channels() const;
  // Stride of each level relative to the previous one.
  std::array<std::size_t, 3> level_strides() const;
};

void register_image_encoder(ParameterStore& params, const ImageEncoderConfig& config);

// Three-level 2-D encoder: full, 1/2 and 1/4 scale features (for downscale 4),
// each average-pooled to volume resolution and concatenated.
// Returns [C_img x H/r x W/r].
Tensor extract_image_features(const RGBImage& image, const ParameterStore& params,
                              const ImageEncoderConfig& config);

// vo, vr: [D x 1 x H x W], vi: [C_img x H x W] -> [D x (2 + C_img) x H x W]
Tensor assemble_feature_volume(const Tensor& occupancy, const Tensor& residual,
                               const Tensor& image_features);

void register_cost_encoder(ParameterStore& params, std::size_t in_channels,
                           std::size_t channels);

// Two-level 3-D U-Net (Cin -> C -> 2C, skip-connected back to C) applied to a
// [D x Cin x H x W] feature volume. H and W must be divisible by 4.
CostVolume encode_cost_volume(const Tensor& feature_volume, const ParameterStore& params,
                              const DepthPlaneSet& planes);

// Swaps the leading two axes: [A x B x H x W] -> [B x A x H x W].
Tensor swap_leading_axes(const Tensor& x);

}  // namespace rayfusion
