#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "rayfusion/cost_volume.hpp"
#include "rayfusion/depth_regression.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/image.hpp"
#include "rayfusion/parameters.hpp"
#include "rayfusion/ray_fusion.hpp"

namespace rayfusion {

enum class FusionMode { kSingleView, kFused };

struct ModelConfig {
  std::size_t plane_count = 16;
  double d_min = 0.001;
  double d_max = 10.0;
  std::size_t channels = 16;
  std::size_t image_channels = 12;
  std::size_t downscale = 4;
  FusionMode mode = FusionMode::kFused;
  FusionConfig fusion;
  bool refinement = true;
  RefinementConfig refine;

  void validate() const;
  DepthPlaneSet planes() const { return make_planes(plane_count, d_min, d_max); }
  ImageEncoderConfig image_encoder() const { return {image_channels, downscale}; }
};

// Registers every module's parameters regardless of mode so checkpoints are
// interchangeable between single-view and fused runs.
ParameterStore make_parameters(const ModelConfig& config);
ParameterStore make_parameters(const ModelConfig& config, std::uint64_t seed);

struct FrameInput {
  const RGBImage& image;
  const SparseDepthMap& sparse;
  const Pose& pose;
};

// Recurrent state carried between frames of one sequence.
struct SequenceState {
  std::optional<CostVolume> previous;
  Pose previous_pose;

  void reset() { previous.reset(); }
};

struct FrameOutput {
  CostVolume fused;
  ProbabilityVolume probabilities;
  DepthMap regressed;
  DepthMap refined;  // equals `regressed` when refinement is off

  const DepthMap& final_depth() const { return refined; }
};

// Runs cost-volume creation, fusion with the carried volume, regression and
// (optionally) refinement for one frame and advances `state`. With
// `keep_graph` the carried volume stays attached so a later frame can
// backpropagate into this one; otherwise it is detached.
FrameOutput forward_frame(const ParameterStore& params, const ModelConfig& config,
                          const CameraIntrinsics& intrinsics, const FrameInput& frame,
                          SequenceState& state, bool keep_graph = false);

}  // namespace rayfusion
