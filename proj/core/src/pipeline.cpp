#include "rayfusion/pipeline.hpp"

#include <string>

#include "rayfusion/errors.hpp"

namespace rayfusion {

void ModelConfig::validate() const {
  if (plane_count < 2) throw ParameterError("model: plane count must be at least 2");
  if (!(d_min > 0.0 && d_min < d_max)) throw ParameterError("model: need 0 < d_min < d_max");
  if (downscale != 1 && downscale != 2 && downscale != 4) {
    throw ParameterError("model: downscale must be 1, 2 or 4");
  }
  if (channels == 0 || channels % 2) throw ParameterError("model: channels must be even");
  if (image_channels < 3) throw ParameterError("model: image channels must be at least 3");
  if (fusion.heads == 0 || channels % fusion.heads) {
    throw ParameterError("model: attention heads must divide channels");
  }
  if (refine.hidden == 0) throw ParameterError("model: refinement width must be positive");
}

ParameterStore make_parameters(const ModelConfig& config) {
  config.validate();
  ParameterStore params;
  register_image_encoder(params, config.image_encoder());
  register_cost_encoder(params, 2 + config.image_channels, config.channels);
  register_fusion(params, config.channels);
  register_regression_head(params, config.channels, config.downscale);
  register_refinement(params, config.refine);
  return params;
}

ParameterStore make_parameters(const ModelConfig& config, std::uint64_t seed) {
  ParameterStore params = make_parameters(config);
  init_glorot_uniform(params, seed);
  return params;
}

FrameOutput forward_frame(const ParameterStore& params, const ModelConfig& config,
                          const CameraIntrinsics& intrinsics, const FrameInput& frame,
                          SequenceState& state, bool keep_graph) {
  intrinsics.validate();
  if (frame.image.width != intrinsics.width || frame.image.height != intrinsics.height ||
      frame.sparse.width != intrinsics.width || frame.sparse.height != intrinsics.height) {
    throw DimensionError("frame extents do not match intrinsics " +
                         std::to_string(intrinsics.width) + "x" +
                         std::to_string(intrinsics.height));
  }
  frame.pose.validate();
  const std::size_t r = config.downscale;
  const DepthPlaneSet planes = config.planes();

  const SparseDepthMap sparse_low = frame.sparse.downsample_min(r);
  const Tensor features = assemble_feature_volume(
      build_occupancy_volume(sparse_low, planes), build_residual_volume(sparse_low, planes),
      extract_image_features(frame.image, params, config.image_encoder()));
  const CostVolume current = encode_cost_volume(features, params, planes);

  CostVolume fused;
  if (config.mode == FusionMode::kFused && state.previous) {
    const Pose rel = relative_pose(frame.pose, state.previous_pose);
    const CostVolume aligned = align_volume(*state.previous, rel, intrinsics.scaled(r));
    fused = fuse_volumes(current, &aligned, params, config.fusion);
  } else {
    fused = fuse_volumes(current, nullptr, params, config.fusion);
  }

  Regression regression = regress_depth(to_unnormalized_probability(fused, params, r), planes);
  DepthMap refined = regression.depth;
  if (config.refinement) {
    refined = refine_depth(regression.depth, regression.depth.confidence, frame.image,
                           frame.sparse, params, config.refine.iterations, config.d_max);
  }

  state.previous =
      CostVolume{fused.planes, keep_graph ? fused.features : fused.features.detach(), {}};
  state.previous_pose = frame.pose;
  return {std::move(fused), std::move(regression.probabilities), std::move(regression.depth),
          std::move(refined)};
}

}  // namespace rayfusion
