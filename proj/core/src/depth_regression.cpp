#include "rayfusion/depth_regression.hpp"

#include <algorithm>
#include <array>
#include <string>

#include "rayfusion/errors.hpp"
#include "rayfusion/ops.hpp"

namespace rayfusion {

namespace {

constexpr double kSlope = 0.01;
constexpr std::array<std::array<int, 2>, 8> kNeighbours{
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

Tensor plane(const Tensor& x, std::size_t h, std::size_t w) { return ops::reshape(x, {1, h, w}); }

}  // namespace

void register_regression_head(ParameterStore& params, std::size_t channels,
                              std::size_t upscale) {
  if (upscale == 0) throw ParameterError("regression head: upscale must be positive");
  params.add("regress.conv.weight", {upscale * upscale, channels, 3, 3, 3});
  params.add("regress.conv.bias", {upscale * upscale});
}

Tensor pixel_shuffle(const Tensor& x, std::size_t upscale) {
  const std::size_t r = upscale;
  if (x.dim() != 4 || x.size(0) != r * r) {
    throw DimensionError("pixel_shuffle: expected [" + std::to_string(r * r) +
                         " x D x H x W], got " + shape_string(x.shape()));
  }
  const std::size_t d = x.size(1), h = x.size(2), w = x.size(3);
  if (r == 1) return ops::reshape(x, {d, h, w});
  const Tensor blocks = ops::reshape(x, {r, r, d, h, w});
  return ops::reshape(ops::permute(blocks, {2, 3, 0, 4, 1}), {d, h * r, w * r});
}

Tensor to_unnormalized_probability(const CostVolume& volume, const ParameterStore& params,
                                   std::size_t upscale) {
  const Tensor& weight = params.at("regress.conv.weight");
  if (upscale == 0 || weight.size(0) < upscale * upscale) {
    throw ParameterError("regression head: upscale " + std::to_string(upscale) +
                         " needs at least " + std::to_string(upscale * upscale) +
                         " output channels, conv has " + std::to_string(weight.size(0)));
  }
  Tensor logits =
      ops::conv3d(swap_leading_axes(volume.features), weight, params.at("regress.conv.bias"));
  if (logits.size(0) != upscale * upscale) logits = ops::narrow(logits, 0, 0, upscale * upscale);
  return pixel_shuffle(logits, upscale);
}

Regression regress_depth(const Tensor& logits, const DepthPlaneSet& planes) {
  if (logits.dim() != 3 || logits.size(0) != planes.count) {
    throw DimensionError("regress_depth: expected [" + std::to_string(planes.count) +
                         " x H x W] logits, got " + shape_string(logits.shape()));
  }
  const std::size_t d = logits.size(0), h = logits.size(1), w = logits.size(2);
  const Tensor probs = ops::softmax_lastdim(ops::permute(logits, {1, 2, 0}));  // [H x W x D]
  std::vector<double> tiled(h * w * d);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::copy(planes.depths.begin(), planes.depths.end(), tiled.begin() + p * d);
  }
  const Tensor depth =
      ops::sum_lastdim(ops::mul(probs, Tensor::from_data({h, w, d}, std::move(tiled))));
  ProbabilityVolume volume{planes, ops::permute(probs, {2, 0, 1})};
  Tensor confidence = confidence_map(volume);
  return {{depth, confidence}, std::move(volume)};
}

Tensor confidence_map(const ProbabilityVolume& probabilities) {
  const Tensor& p = probabilities.probs;
  if (p.dim() != 3) throw DimensionError("confidence_map: expected [D x H x W]");
  const std::size_t d = p.size(0), plane_size = p.size(1) * p.size(2);
  auto values = p.data();
  std::vector<double> out(values.begin(), values.begin() + plane_size);
  std::vector<std::size_t> arg(plane_size, 0);
  for (std::size_t i = 1; i < d; ++i) {
    for (std::size_t q = 0; q < plane_size; ++q) {
      if (values[i * plane_size + q] > out[q]) {
        out[q] = values[i * plane_size + q];
        arg[q] = i;
      }
    }
  }
  // The gradient flows to the first maximal plane of each ray.
  return detail::make_result({p.size(1), p.size(2)}, std::move(out), {p},
                             [arg = std::move(arg), plane_size](const detail::Node& self,
                                                                detail::ParentGrads& g) {
                               if (g[0].empty()) return;
                               for (std::size_t q = 0; q < plane_size; ++q) {
                                 g[0][arg[q] * plane_size + q] += self.grad[q];
                               }
                             });
}

void register_refinement(ParameterStore& params, const RefinementConfig& config) {
  params.add("refine.conv0.weight", {config.hidden, 6, 3, 3});
  params.add("refine.conv0.bias", {config.hidden});
  params.add("refine.conv1.weight", {kNeighbours.size(), config.hidden, 3, 3});
  params.add("refine.conv1.bias", {kNeighbours.size()});
}

DepthMap refine_depth(const DepthMap& depth, const Tensor& confidence, const RGBImage& image,
                      const SparseDepthMap& sparse, const ParameterStore& params,
                      std::size_t iterations, double depth_scale) {
  if (iterations == 0) return depth;
  const std::size_t h = depth.height(), w = depth.width();
  if (image.width != w || image.height != h || sparse.width != w || sparse.height != h ||
      confidence.shape() != depth.depth.shape()) {
    throw DimensionError("refine_depth: inputs must share the depth map's " +
                         std::to_string(w) + "x" + std::to_string(h) + " extents");
  }
  if (!(depth_scale > 0.0)) throw ParameterError("refine_depth: depth scale must be positive");

  const double inv_scale = 1.0 / depth_scale;
  const Tensor guide = ops::concat({image.to_tensor(),
                                    plane(ops::mul_scalar(depth.depth, inv_scale), h, w),
                                    plane(ops::mul_scalar(sparse.depth_tensor(), inv_scale), h, w),
                                    plane(confidence, h, w)},
                                   0);
  const Tensor hidden = ops::leaky_relu(
      ops::conv2d(guide, params.at("refine.conv0.weight"), params.at("refine.conv0.bias")),
      kSlope);
  const Tensor raw =
      ops::conv2d(hidden, params.at("refine.conv1.weight"), params.at("refine.conv1.bias"));

  std::vector<Tensor> squared;
  Tensor total = Tensor::full({h, w}, 1.0);
  for (std::size_t k = 0; k < kNeighbours.size(); ++k) {
    squared.push_back(ops::square(ops::reshape(ops::narrow(raw, 0, k, 1), {h, w})));
    total = ops::add(total, squared.back());
  }
  std::vector<Tensor> affinity;
  for (const Tensor& s : squared) affinity.push_back(ops::div(s, total));
  const Tensor self_weight = ops::div(Tensor::full({h, w}, 1.0), total);

  // Off-grid neighbours fall back to the centre pixel so borders stay affine.
  std::vector<Tensor> outside;
  const Tensor ones = Tensor::full({h, w}, 1.0);
  for (const auto& [dy, dx] : kNeighbours) {
    outside.push_back(ops::add_scalar(ops::mul_scalar(ops::shift2d(ones, dy, dx), -1.0), 1.0));
  }

  const Tensor keep = ops::mul(sparse.mask_tensor(), confidence);
  const Tensor release = ops::add_scalar(ops::mul_scalar(keep, -1.0), 1.0);
  const Tensor anchored = ops::mul(keep, depth.depth);

  Tensor current = depth.depth;
  for (std::size_t it = 0; it < iterations; ++it) {
    Tensor next = ops::mul(self_weight, current);
    for (std::size_t k = 0; k < kNeighbours.size(); ++k) {
      const auto [dy, dx] = kNeighbours[k];
      const Tensor neighbour =
          ops::add(ops::shift2d(current, dy, dx), ops::mul(outside[k], current));
      next = ops::add(next, ops::mul(affinity[k], neighbour));
    }
    current = ops::add(anchored, ops::mul(release, next));
  }
  return {current, depth.confidence};
}

}  // namespace rayfusion
