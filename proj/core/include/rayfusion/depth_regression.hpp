#pragma once

#include <cstddef>

#include "rayfusion/cost_volume.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/image.hpp"
#include "rayfusion/parameters.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

// Per-pixel distributions over the hypothesis planes, [D x H x W].
struct ProbabilityVolume {
  DepthPlaneSet planes;
  Tensor probs;
};

struct DepthMap {
  Tensor depth;       // [H x W]
  Tensor confidence;  // [H x W], may be undefined

  std::size_t height() const { return depth.size(0); }
  std::size_t width() const { return depth.size(1); }
};

void register_regression_head(ParameterStore& params, std::size_t channels,
                              std::size_t upscale);

// [r*r x D x H x W] -> [D x r*H x r*W]; channel i*r + j lands at offset (i, j)
// of each r x r block.
Tensor pixel_shuffle(const Tensor& x, std::size_t upscale);

// One k=3 conv3d mapping C -> r^2 channels per plane, then per-plane pixel
// shuffle to full resolution: [D x r*H' x r*W'] logits.
Tensor to_unnormalized_probability(const CostVolume& volume, const ParameterStore& params,
                                   std::size_t upscale);

struct Regression {
  DepthMap depth;
  ProbabilityVolume probabilities;
};

// Softmax over planes and the expected plane depth per pixel.
Regression regress_depth(const Tensor& logits, const DepthPlaneSet& planes);

// max_d P(d, h, w), differentiable through the winning plane.
Tensor confidence_map(const ProbabilityVolume& probabilities);

struct RefinementConfig {
  std::size_t iterations = 6;
  std::size_t hidden = 8;
};

void register_refinement(ParameterStore& params, const RefinementConfig& config = {});

// Eight-neighbour affinities from a shallow 2-D conv stack over
// (image, depth, sparse, confidence). Raw outputs are squared and normalised
// by 1 + their sum, so the self weight 1 - sum(a_k) is non-negative and the
// weights of every step sum to one. Pixels carrying a sparse sample are
// pulled back towards the input depth by their confidence.
DepthMap refine_depth(const DepthMap& depth, const Tensor& confidence, const RGBImage& image,
                      const SparseDepthMap& sparse, const ParameterStore& params,
                      std::size_t iterations, double depth_scale = 1.0);

}  // namespace rayfusion
