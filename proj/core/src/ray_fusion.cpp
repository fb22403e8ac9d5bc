#include "rayfusion/ray_fusion.hpp"

#include <algorithm>
#include <cmath>

#include "rayfusion/errors.hpp"
#include "rayfusion/ops.hpp"

namespace rayfusion {

namespace {

constexpr double kSlope = 0.01;
constexpr double kMaskedLogit = -1e9;

const char* const kBlockNames[] = {"self_current", "self_previous", "cross"};

// [B x D x C] -> [B*h x D x C/h]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t b = x.size(0), d = x.size(1), c = x.size(2);
  const Tensor split = ops::reshape(x, {b, d, heads, c / heads});
  return ops::reshape(ops::permute(split, {0, 2, 1, 3}), {b * heads, d, c / heads});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  if (heads == 1) return x;
  const std::size_t d = x.size(1), c = x.size(2);
  const Tensor split = ops::reshape(x, {batch, heads, d, c});
  return ops::reshape(ops::permute(split, {0, 2, 1, 3}), {batch, d, heads * c});
}

Tensor project_tokens(const Tensor& tokens, const Tensor& weight) {
  const std::size_t b = tokens.size(0), d = tokens.size(1), c = tokens.size(2);
  return ops::reshape(ops::matmul(ops::reshape(tokens, {b * d, c}), weight),
                      {b, d, weight.size(1)});
}

std::vector<std::uint8_t> ray_key_mask(const std::vector<std::uint8_t>& validity,
                                       std::size_t depth_n, std::size_t plane_size) {
  // validity is [D x H x W]; rays are [H*W x D]
  std::vector<std::uint8_t> mask(depth_n * plane_size);
  for (std::size_t i = 0; i < depth_n; ++i) {
    for (std::size_t p = 0; p < plane_size; ++p) mask[p * depth_n + i] = validity[i * plane_size + p];
  }
  return mask;
}

Tensor fuse_rays(const Tensor& current_rays, const Tensor* previous_rays, const Tensor& encoding,
                 const ParameterStore& params, const FusionConfig& config,
                 const std::vector<std::uint8_t>* key_valid) {
  const auto sa_current = AttentionBlockParams::from_store(params, "fusion.self_current");
  const Tensor fc = ops::add_trailing(current_rays, encoding);
  Tensor out = attention_batched(fc, fc, fc, sa_current, config.heads);
  if (previous_rays) {
    const auto sa_previous = AttentionBlockParams::from_store(params, "fusion.self_previous");
    const auto cross = AttentionBlockParams::from_store(params, "fusion.cross");
    const Tensor fp = ops::add_trailing(*previous_rays, encoding);
    const Tensor sp = attention_batched(fp, fp, fp, sa_previous, config.heads);
    out = attention_batched(out, sp, sp, cross, config.heads,
                            config.mask_invalid ? key_valid : nullptr);
  }
  if (config.residual) out = ops::add(out, current_rays);
  return out;
}

void check_pair(const CostVolume& current, const CostVolume* previous) {
  if (current.features.dim() != 4) {
    throw DimensionError("fuse_volumes: expected [D x C x H x W], got " +
                         shape_string(current.features.shape()));
  }
  if (previous && previous->features.shape() != current.features.shape()) {
    throw DimensionError("fuse_volumes: volume shapes differ " +
                         shape_string(current.features.shape()) + " vs " +
                         shape_string(previous->features.shape()));
  }
}

}  // namespace

AttentionBlockParams AttentionBlockParams::from_store(const ParameterStore& params,
                                                      const std::string& prefix) {
  return {params.at(prefix + ".w_q"), params.at(prefix + ".w_k"), params.at(prefix + ".w_v"),
          params.at(prefix + ".w_o")};
}

void AttentionScoreTracker::reset() {
  live_bytes_ = 0;
  peak_bytes_ = 0;
  total_entries_ = 0;
  allocations_ = 0;
}

void AttentionScoreTracker::on_allocate(std::size_t entries) {
  const std::size_t now = live_bytes_.fetch_add(entries * sizeof(double)) + entries * sizeof(double);
  std::size_t peak = peak_bytes_.load();
  while (now > peak && !peak_bytes_.compare_exchange_weak(peak, now)) {
  }
  total_entries_ += entries;
  ++allocations_;
}

void AttentionScoreTracker::on_release(std::size_t entries) {
  live_bytes_ -= entries * sizeof(double);
}

AttentionScoreTracker& attention_score_tracker() {
  static AttentionScoreTracker tracker;
  return tracker;
}

Tensor depth_positional_encoding(std::size_t count, std::size_t dim) {
  if (dim == 0 || dim % 2) throw ParameterError("positional encoding: dimension must be even");
  std::vector<double> pe(count * dim);
  for (std::size_t p = 0; p < count; ++p) {
    for (std::size_t j = 0; j < dim / 2; ++j) {
      const double freq =
          std::pow(10000.0, static_cast<double>(2 * j) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) / freq;
      pe[p * dim + 2 * j] = std::sin(angle);
      pe[p * dim + 2 * j + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({count, dim}, std::move(pe));
}

Tensor attention_weights(const Tensor& q, const Tensor& k, double scale,
                         const std::vector<std::uint8_t>* key_valid) {
  if (q.dim() != 3 || k.dim() != 3 || q.size(0) != k.size(0) || q.size(2) != k.size(2)) {
    throw DimensionError("attention_weights: incompatible shapes " + shape_string(q.shape()) +
                         " and " + shape_string(k.shape()));
  }
  const std::size_t batch = q.size(0), dq = q.size(1), dk = k.size(1), c = q.size(2);
  if (key_valid && key_valid->size() != batch * dk) {
    throw DimensionError("attention_weights: key mask does not match " + shape_string(k.shape()));
  }
  const std::size_t entries = batch * dq * dk;
  std::vector<double> a(entries);
  auto qv = q.data();
  auto kv = k.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < dq; ++i) {
      double* row = a.data() + (b * dq + i) * dk;
      const double* qi = qv.data() + (b * dq + i) * c;
      for (std::size_t j = 0; j < dk; ++j) {
        const double* kj = kv.data() + (b * dk + j) * c;
        double s = 0.0;
        for (std::size_t p = 0; p < c; ++p) s += qi[p] * kj[p];
        row[j] = s * scale;
        if (key_valid && !(*key_valid)[b * dk + j]) row[j] += kMaskedLogit;
        if (!std::isfinite(row[j])) throw NumericError("attention_weights: non-finite score");
      }
      const double peak = *std::max_element(row, row + dk);
      double total = 0.0;
      for (std::size_t j = 0; j < dk; ++j) {
        row[j] = std::exp(row[j] - peak);
        total += row[j];
      }
      for (std::size_t j = 0; j < dk; ++j) row[j] /= total;
    }
  }
  Tensor out = detail::make_result(
      {batch, dq, dk}, std::move(a), {q, k},
      [batch, dq, dk, c, scale](const detail::Node& self, detail::ParentGrads& g) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        std::vector<double> ds(dk);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < dq; ++i) {
            const std::size_t row = (b * dq + i) * dk;
            double dot = 0.0;
            for (std::size_t j = 0; j < dk; ++j) dot += self.grad[row + j] * self.value[row + j];
            for (std::size_t j = 0; j < dk; ++j) {
              ds[j] = self.value[row + j] * (self.grad[row + j] - dot) * scale;
            }
            const double* qi = qv.data() + (b * dq + i) * c;
            for (std::size_t j = 0; j < dk; ++j) {
              const double* kj = kv.data() + (b * dk + j) * c;
              if (!g[0].empty()) {
                double* gq = g[0].data() + (b * dq + i) * c;
                for (std::size_t p = 0; p < c; ++p) gq[p] += ds[j] * kj[p];
              }
              if (!g[1].empty()) {
                double* gk = g[1].data() + (b * dk + j) * c;
                for (std::size_t p = 0; p < c; ++p) gk[p] += ds[j] * qi[p];
              }
            }
          }
        }
      });
  auto& tracker = attention_score_tracker();
  tracker.on_allocate(entries);
  out.attach_resource(std::shared_ptr<void>(nullptr, [entries, &tracker](void*) {
    tracker.on_release(entries);
  }));
  return out;
}

Tensor attention_batched(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionBlockParams& block, std::size_t heads,
                         const std::vector<std::uint8_t>* key_valid) {
  if (q.dim() != 3 || k.dim() != 3 || v.shape() != k.shape() || q.size(0) != k.size(0)) {
    throw DimensionError("attention: incompatible token shapes " + shape_string(q.shape()) +
                         ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  const std::size_t c = block.dim();
  for (const Tensor* w : {&block.w_q, &block.w_k, &block.w_v, &block.w_o}) {
    if (w->dim() != 2 || w->size(0) != c || w->size(1) != c) {
      throw DimensionError("attention: projections must be square C x C");
    }
  }
  if (q.size(2) != c || k.size(2) != c) {
    throw DimensionError("attention: token width " + std::to_string(q.size(2)) +
                         " does not match projection width " + std::to_string(c));
  }
  if (heads == 0 || c % heads) throw ParameterError("attention: heads must divide C");
  const std::size_t batch = q.size(0);
  const Tensor qp = split_heads(project_tokens(q, block.w_q), heads);
  const Tensor kp = split_heads(project_tokens(k, block.w_k), heads);
  const Tensor vp = split_heads(project_tokens(v, block.w_v), heads);
  std::vector<std::uint8_t> head_mask;
  if (key_valid && heads > 1) {
    const std::size_t dk = k.size(1);
    head_mask.resize(batch * heads * dk);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(key_valid->begin() + b * dk, dk, head_mask.begin() + (b * heads + h) * dk);
      }
    }
    key_valid = &head_mask;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(c / heads));
  const Tensor weights = attention_weights(qp, kp, scale, key_valid);
  const Tensor mixed = merge_heads(ops::bmm(weights, vp), batch, heads);
  return project_tokens(mixed, block.w_o);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionBlockParams& block) {
  if (q.dim() != 2 || k.dim() != 2 || v.dim() != 2) {
    throw DimensionError("attention: expected [D x C] token matrices");
  }
  const Tensor out =
      attention_batched(ops::reshape(q, {1, q.size(0), q.size(1)}),
                        ops::reshape(k, {1, k.size(0), k.size(1)}),
                        ops::reshape(v, {1, v.size(0), v.size(1)}), block);
  return ops::reshape(out, {q.size(0), out.size(2)});
}

void register_fusion(ParameterStore& params, std::size_t channels) {
  if (channels % 2) throw ParameterError("fusion: channel count must be even");
  for (const char* conv : {"fusion.pre0", "fusion.pre1"}) {
    params.add(std::string(conv) + ".weight", {channels, channels, 3, 3, 3});
    params.add(std::string(conv) + ".bias", {channels});
  }
  for (const char* block : kBlockNames) {
    for (const char* w : {"w_q", "w_k", "w_v", "w_o"}) {
      params.add("fusion." + std::string(block) + "." + w, {channels, channels});
    }
  }
}

CostVolume pre_fusion_convs(const CostVolume& volume, const ParameterStore& params) {
  Tensor x = swap_leading_axes(volume.features);
  x = ops::leaky_relu(
      ops::conv3d(x, params.at("fusion.pre0.weight"), params.at("fusion.pre0.bias")), kSlope);
  x = ops::conv3d(x, params.at("fusion.pre1.weight"), params.at("fusion.pre1.bias"));
  return {volume.planes, swap_leading_axes(x), volume.validity};
}

Tensor volume_to_rays(const Tensor& volume) {
  const std::size_t d = volume.size(0), c = volume.size(1), h = volume.size(2), w = volume.size(3);
  return ops::reshape(ops::permute(volume, {2, 3, 0, 1}), {h * w, d, c});
}

Tensor rays_to_volume(const Tensor& rays, std::size_t height, std::size_t width) {
  const std::size_t d = rays.size(1), c = rays.size(2);
  return ops::permute(ops::reshape(rays, {height, width, d, c}), {2, 3, 0, 1});
}

CostVolume fuse_volumes(const CostVolume& current, const CostVolume* previous_aligned,
                        const ParameterStore& params, const FusionConfig& config) {
  check_pair(current, previous_aligned);
  const std::size_t depth_n = current.depth_count();
  const std::size_t height = current.height(), width = current.width();
  const std::size_t rays = height * width;
  const Tensor encoding = depth_positional_encoding(depth_n, current.channels());

  const Tensor current_rays = volume_to_rays(pre_fusion_convs(current, params).features);
  Tensor previous_rays;
  std::vector<std::uint8_t> key_valid;
  if (previous_aligned) {
    previous_rays = volume_to_rays(pre_fusion_convs(*previous_aligned, params).features);
    key_valid = previous_aligned->validity.empty()
                    ? std::vector<std::uint8_t>(rays * depth_n, 1)
                    : ray_key_mask(previous_aligned->validity, depth_n, rays);
  }

  const std::size_t chunk = config.ray_chunk == 0 ? rays : std::min(config.ray_chunk, rays);
  std::vector<Tensor> pieces;
  for (std::size_t start = 0; start < rays; start += chunk) {
    const std::size_t n = std::min(chunk, rays - start);
    const Tensor cur = n == rays ? current_rays : ops::narrow(current_rays, 0, start, n);
    Tensor prev;
    std::vector<std::uint8_t> mask;
    if (previous_aligned) {
      prev = n == rays ? previous_rays : ops::narrow(previous_rays, 0, start, n);
      mask.assign(key_valid.begin() + start * depth_n, key_valid.begin() + (start + n) * depth_n);
    }
    pieces.push_back(fuse_rays(cur, previous_aligned ? &prev : nullptr, encoding, params, config,
                               previous_aligned ? &mask : nullptr));
  }
  const Tensor fused = pieces.size() == 1 ? pieces[0] : ops::concat(pieces, 0);
  return {current.planes, rays_to_volume(fused, height, width), {}};
}

CostVolume fuse_volumes_naive(const CostVolume& current, const CostVolume* previous_aligned,
                              const ParameterStore& params, const FusionConfig& config) {
  check_pair(current, previous_aligned);
  const std::size_t d = current.depth_count(), c = current.channels();
  const std::size_t h = current.height(), w = current.width();
  const std::size_t tokens = d * h * w;
  // Every voxel becomes a token, ordered (plane, row, col).
  auto flatten = [&](const CostVolume& v) {
    return ops::reshape(ops::permute(pre_fusion_convs(v, params).features, {0, 2, 3, 1}),
                        {1, tokens, c});
  };
  const Tensor pe = depth_positional_encoding(d, c);
  std::vector<double> pe_full(tokens * c);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t p = 0; p < h * w; ++p) {
      std::copy_n(pe.data().begin() + i * c, c, pe_full.begin() + (i * h * w + p) * c);
    }
  }
  const Tensor encoding = Tensor::from_data({tokens, c}, std::move(pe_full));

  const Tensor cur = flatten(current);
  const Tensor fc = ops::add_trailing(cur, encoding);
  Tensor out = attention_batched(fc, fc, fc,
                                 AttentionBlockParams::from_store(params, "fusion.self_current"),
                                 config.heads);
  if (previous_aligned) {
    const Tensor fp = ops::add_trailing(flatten(*previous_aligned), encoding);
    const Tensor sp = attention_batched(
        fp, fp, fp, AttentionBlockParams::from_store(params, "fusion.self_previous"),
        config.heads);
    std::vector<std::uint8_t> mask;
    if (config.mask_invalid && !previous_aligned->validity.empty()) mask = previous_aligned->validity;
    out = attention_batched(out, sp, sp, AttentionBlockParams::from_store(params, "fusion.cross"),
                            config.heads, mask.empty() ? nullptr : &mask);
  }
  if (config.residual) out = ops::add(out, cur);
  const Tensor volume = ops::permute(ops::reshape(out, {d, h, w, c}), {0, 3, 1, 2});
  return {current.planes, volume, {}};
}

std::uint64_t attention_entry_count(std::uint64_t d, std::uint64_t h, std::uint64_t w,
                                    AttentionMode mode) {
  if (d == 0 || h == 0 || w == 0) throw ParameterError("attention_entry_count: extents must be positive");
  return mode == AttentionMode::kRay ? d * d * h * w : d * d * h * h * w * w;
}

}  // namespace rayfusion
