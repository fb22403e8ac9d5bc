#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rayfusion/cost_volume.hpp"
#include "rayfusion/parameters.hpp"
#include "rayfusion/tensor.hpp"

namespace rayfusion {

// W_Q, W_K, W_V, W_O of one single-head (or split multi-head) attention block.
struct AttentionBlockParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;

  static AttentionBlockParams from_store(const ParameterStore& params, const std::string& prefix);
  std::size_t dim() const { return w_q.size(0); }
};

struct FusionConfig {
  bool residual = true;
  std::size_t heads = 1;
  // Exclude out-of-frustum previous tokens from cross-attention keys.
  bool mask_invalid = false;
  // Rays processed per attention call; 0 means the whole frame at once.
  std::size_t ray_chunk = 0;
};

// Counts attention-map buffers (the post-softmax D_q x D_k weights) as they
// are allocated and released.
class AttentionScoreTracker {
 public:
  void reset();
  void on_allocate(std::size_t entries);
  void on_release(std::size_t entries);

  std::size_t live_bytes() const { return live_bytes_.load(); }
  std::size_t peak_bytes() const { return peak_bytes_.load(); }
  std::size_t total_entries() const { return total_entries_.load(); }
  std::size_t allocations() const { return allocations_.load(); }

 private:
  std::atomic<std::size_t> live_bytes_{0};
  std::atomic<std::size_t> peak_bytes_{0};
  std::atomic<std::size_t> total_entries_{0};
  std::atomic<std::size_t> allocations_{0};
};

AttentionScoreTracker& attention_score_tracker();

// PE(p, 2j) = sin(p / 10000^(2j/C)), PE(p, 2j+1) = cos(p / 10000^(2j/C)).
Tensor depth_positional_encoding(std::size_t count, std::size_t dim);

// softmax(Q K^T * scale [+ key mask]) for batched Q: [B x Dq x c], K: [B x Dk x c].
// `key_valid` (B x Dk, optional) pushes masked keys to -1e9 before the softmax.
// The single output buffer is reported to attention_score_tracker().
Tensor attention_weights(const Tensor& q, const Tensor& k, double scale,
                         const std::vector<std::uint8_t>* key_valid = nullptr);

// Attn(Q, K, V) = (softmax(Q W_Q (K W_K)^T / sqrt(d)) V W_V) W_O on batched
// token sets q: [B x Dq x C], k, v: [B x Dk x C].
Tensor attention_batched(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionBlockParams& block, std::size_t heads = 1,
                         const std::vector<std::uint8_t>* key_valid = nullptr);

// Single-ray form: q: [Dq x C], k, v: [Dk x C].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionBlockParams& block);

void register_fusion(ParameterStore& params, std::size_t channels);

// Two k=3 conv3d layers (C -> C) with a leaky rectifier in between.
CostVolume pre_fusion_convs(const CostVolume& volume, const ParameterStore& params);

// Per-ray self-attention on both streams, then cross-attention with the
// current stream as query. Without a previous volume (first frame or
// single-view mode) only the current self-attention runs.
CostVolume fuse_volumes(const CostVolume& current, const CostVolume* previous_aligned,
                        const ParameterStore& params, const FusionConfig& config = {});

// Reference path that attends across every voxel of both volumes at once.
// Only meant for tiny sizes and the memory benchmark.
CostVolume fuse_volumes_naive(const CostVolume& current, const CostVolume* previous_aligned,
                              const ParameterStore& params, const FusionConfig& config = {});

enum class AttentionMode { kRay, kNaive };

// ray: d^2 h w, naive: d^2 h^2 w^2.
std::uint64_t attention_entry_count(std::uint64_t d, std::uint64_t h, std::uint64_t w,
                                    AttentionMode mode);

// [D x C x H x W] -> [H*W x D x C] and back.
Tensor volume_to_rays(const Tensor& volume);
Tensor rays_to_volume(const Tensor& rays, std::size_t height, std::size_t width);

}  // namespace rayfusion
