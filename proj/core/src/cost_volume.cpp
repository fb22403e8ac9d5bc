#include "rayfusion/cost_volume.hpp"

#include <cmath>

#include "rayfusion/errors.hpp"
#include "rayfusion/ops.hpp"

namespace rayfusion {

namespace {

constexpr double kSlope = 0.01;

void check_sparse(const SparseDepthMap& sparse) {
  if (sparse.depth.size() != sparse.width * sparse.height ||
      sparse.valid.size() != sparse.width * sparse.height) {
    throw DimensionError("sparse depth map buffers do not match its extents");
  }
}

// Nearest plane with ties resolved to the lower index.
std::size_t nearest_plane(double depth, const DepthPlaneSet& planes) {
  std::size_t best = 0;
  double best_dist = std::fabs(depth - planes.depths[0]);
  for (std::size_t i = 1; i < planes.count; ++i) {
    const double dist = std::fabs(depth - planes.depths[i]);
    if (dist < best_dist) {
      best = i;
      best_dist = dist;
    }
  }
  return best;
}

Tensor conv_block(const Tensor& x, const ParameterStore& params, const std::string& name,
                  std::array<std::size_t, 3> stride = {1, 1, 1}) {
  return ops::leaky_relu(
      ops::conv3d(x, params.at(name + ".weight"), params.at(name + ".bias"), {stride}), kSlope);
}

Tensor up_block(const Tensor& x, const ParameterStore& params, const std::string& name) {
  return ops::leaky_relu(ops::conv_transpose3d(x, params.at(name + ".weight"),
                                               params.at(name + ".bias"), {1, 2, 2}, {0, 1, 1}),
                         kSlope);
}

}  // namespace

CostVolume align_volume(const CostVolume& volume, const Pose& previous_to_current,
                        const CameraIntrinsics& k) {
  AlignedVolume aligned = align_volume(volume.features, previous_to_current, k, volume.planes);
  return {volume.planes, std::move(aligned.features), std::move(aligned.valid)};
}

Tensor build_occupancy_volume(const SparseDepthMap& sparse, const DepthPlaneSet& planes) {
  check_sparse(sparse);
  const std::size_t plane_size = sparse.width * sparse.height;
  std::vector<double> out(planes.count * plane_size, 0.0);
  for (std::size_t p = 0; p < plane_size; ++p) {
    if (!sparse.valid[p]) continue;
    out[nearest_plane(sparse.depth[p], planes) * plane_size + p] = 1.0;
  }
  return Tensor::from_data({planes.count, 1, sparse.height, sparse.width}, std::move(out));
}

Tensor build_residual_volume(const SparseDepthMap& sparse, const DepthPlaneSet& planes) {
  check_sparse(sparse);
  const std::size_t plane_size = sparse.width * sparse.height;
  const double range = planes.d_max - planes.d_min;
  std::vector<double> out(planes.count * plane_size, 0.0);
  for (std::size_t p = 0; p < plane_size; ++p) {
    if (!sparse.valid[p]) continue;
    for (std::size_t i = 0; i < planes.count; ++i) {
      out[i * plane_size + p] = (sparse.depth[p] - planes.depths[i]) / range;
    }
  }
  return Tensor::from_data({planes.count, 1, sparse.height, sparse.width}, std::move(out));
}

std::array<std::size_t, 3> ImageEncoderConfig::level_channels() const {
  const std::size_t base = channels / 3;
  return {channels - 2 * base, base, base};
}

std::array<std::size_t, 3> ImageEncoderConfig::level_strides() const {
  switch (downscale) {
    case 1:
      return {1, 1, 1};
    case 2:
      return {1, 2, 1};
    case 4:
      return {1, 2, 2};
    default:
      throw ParameterError("image encoder: downscale must be 1, 2 or 4");
  }
}

void register_image_encoder(ParameterStore& params, const ImageEncoderConfig& config) {
  if (config.channels < 3) throw ParameterError("image encoder: need at least 3 channels");
  const auto widths = config.level_channels();
  std::size_t in = 3;
  for (std::size_t level = 0; level < 3; ++level) {
    const std::string name = "cost.image.level" + std::to_string(level);
    params.add(name + ".weight", {widths[level], in, 3, 3});
    params.add(name + ".bias", {widths[level]});
    in = widths[level];
  }
}

Tensor extract_image_features(const RGBImage& image, const ParameterStore& params,
                              const ImageEncoderConfig& config) {
  image.validate();
  const std::size_t r = config.downscale;
  const auto strides = config.level_strides();
  if (image.width % r || image.height % r) {
    throw DimensionError("image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " not divisible by downscale " +
                         std::to_string(r));
  }
  Tensor x = image.to_tensor();
  std::vector<Tensor> pooled;
  std::size_t scale = 1;
  for (std::size_t level = 0; level < 3; ++level) {
    const std::string name = "cost.image.level" + std::to_string(level);
    x = ops::leaky_relu(
        ops::conv2d(x, params.at(name + ".weight"), params.at(name + ".bias"), strides[level]),
        kSlope);
    scale *= strides[level];
    pooled.push_back(ops::avg_pool2d(x, r / scale));
  }
  return ops::concat(pooled, 0);
}

Tensor assemble_feature_volume(const Tensor& occupancy, const Tensor& residual,
                               const Tensor& image_features) {
  if (occupancy.dim() != 4 || residual.shape() != occupancy.shape() || occupancy.size(1) != 1 ||
      image_features.dim() != 3 || image_features.size(1) != occupancy.size(2) ||
      image_features.size(2) != occupancy.size(3)) {
    throw DimensionError("assemble_feature_volume: incompatible shapes " +
                         shape_string(occupancy.shape()) + ", " + shape_string(residual.shape()) +
                         ", " + shape_string(image_features.shape()));
  }
  const std::size_t depth_n = occupancy.size(0);
  const Shape plane_shape{1, image_features.size(0), image_features.size(1),
                          image_features.size(2)};
  const Tensor one_plane = ops::reshape(image_features, plane_shape);
  const Tensor replicated =
      depth_n == 1 ? one_plane : ops::concat(std::vector<Tensor>(depth_n, one_plane), 0);
  return ops::concat({occupancy, residual, replicated}, 1);
}

void register_cost_encoder(ParameterStore& params, std::size_t in_channels,
                           std::size_t channels) {
  const std::size_t c = channels;
  auto add = [&](const std::string& name, Shape kernel, std::size_t bias) {
    params.add("cost.unet." + name + ".weight", std::move(kernel));
    params.add("cost.unet." + name + ".bias", {bias});
  };
  add("enc0", {c, in_channels, 3, 3, 3}, c);
  add("enc1", {2 * c, c, 3, 3, 3}, 2 * c);
  add("enc2", {2 * c, 2 * c, 3, 3, 3}, 2 * c);
  add("up1", {2 * c, 2 * c, 3, 3, 3}, 2 * c);  // transposed: [in x out x k..]
  add("up0", {2 * c, c, 3, 3, 3}, c);
  add("out", {c, c, 3, 3, 3}, c);
}

Tensor swap_leading_axes(const Tensor& x) { return ops::permute(x, {1, 0, 2, 3}); }

CostVolume encode_cost_volume(const Tensor& feature_volume, const ParameterStore& params,
                              const DepthPlaneSet& planes) {
  if (feature_volume.dim() != 4 || feature_volume.size(0) != planes.count) {
    throw DimensionError("encode_cost_volume: expected [D x Cin x H x W] with D = " +
                         std::to_string(planes.count) + ", got " +
                         shape_string(feature_volume.shape()));
  }
  if (feature_volume.size(2) % 4 || feature_volume.size(3) % 4) {
    throw DimensionError("encode_cost_volume: spatial extents of " +
                         shape_string(feature_volume.shape()) + " must be divisible by 4");
  }
  const Tensor x = swap_leading_axes(feature_volume);  // [Cin x D x H x W]
  const Tensor e0 = conv_block(x, params, "cost.unet.enc0");
  const Tensor e1 = conv_block(e0, params, "cost.unet.enc1", {1, 2, 2});
  const Tensor e2 = conv_block(e1, params, "cost.unet.enc2", {1, 2, 2});
  const Tensor u1 = ops::add(up_block(e2, params, "cost.unet.up1"), e1);
  const Tensor u0 = ops::add(up_block(u1, params, "cost.unet.up0"), e0);
  const Tensor out =
      ops::conv3d(u0, params.at("cost.unet.out.weight"), params.at("cost.unet.out.bias"));
  return {planes, swap_leading_axes(out), {}};
}

}  // namespace rayfusion
