#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rayfusion/depth_regression.hpp"
#include "rayfusion/geometry.hpp"
#include "rayfusion/image.hpp"
#include "rayfusion/parameters.hpp"
#include "rayfusion/pipeline.hpp"

namespace rayfusion {

struct LossConfig {
  bool l1 = true;
  bool l2 = false;
  bool ce = true;
  // Evaluate the L1 term on the refined depth instead of the regressed one.
  bool spn_l1 = true;

  void validate() const;
};

// Linear split of unit mass between the two planes bracketing `depth`.
// Depths outside [d_min, d_max] snap to the endpoint plane and set *clamped.
std::vector<double> soft_label(double depth, const DepthPlaneSet& planes,
                               bool* clamped = nullptr);

// Masked means over the valid ground-truth pixels. `pred` is [H x W].
Tensor l1_loss(const Tensor& pred, const SparseDepthMap& gt);
Tensor l2_loss(const Tensor& pred, const SparseDepthMap& gt);
// -sum_i p_gt,i log(p_i + 1e-12), averaged over valid pixels.
Tensor ce_loss(const ProbabilityVolume& probabilities, const SparseDepthMap& gt);

struct LossTerms {
  Tensor l1;
  Tensor l2;
  Tensor ce;
  Tensor total;
};

// Unweighted sum of the enabled terms for one frame.
LossTerms frame_loss(const LossConfig& config, const FrameOutput& output,
                     const SparseDepthMap& gt);

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Step counts after which the learning rate is halved.
  std::vector<std::size_t> milestones;
};

struct OptimizerState {
  std::size_t step_count = 0;
  double learning_rate = 1e-3;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;

  static OptimizerState initial(const OptimizerConfig& config);
};

// Decoupled-weight-decay Adam step over every parameter in `params`.
void optimizer_step(ParameterStore& params, OptimizerState& state, const OptimizerConfig& config);

struct TrainingFrame {
  RGBImage image;
  SparseDepthMap sparse;
  SparseDepthMap gt;
  Pose pose;
};

struct Sequence {
  CameraIntrinsics intrinsics;
  std::vector<TrainingFrame> frames;
};

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t sequence = 0;
  std::size_t frame = 0;
  double l1 = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

struct TrainingOptions {
  std::size_t epochs = 1;
  LossConfig loss;
  OptimizerConfig optimizer;
  // Backpropagate through pairs of frames instead of detaching the carried
  // volume after every frame.
  bool bptt = false;
  // Called after each optimizer step; returning false stops training.
  std::function<bool(const LossRecord&)> on_step;
};

struct TrainingResult {
  std::vector<double> epoch_loss;  // mean total loss per epoch
  std::vector<LossRecord> records;
  std::size_t steps = 0;
};

// One optimizer step per frame (or per frame pair with bptt), frames in
// temporal order, the fused volume carried across frames of a sequence.
TrainingResult train_sequences(ParameterStore& params, const ModelConfig& model,
                               const std::vector<Sequence>& sequences,
                               const TrainingOptions& options);

// Summed frame losses over a sequence with the carried volume kept in the
// graph, for gradient checking.
Tensor sequence_loss(const ParameterStore& params, const ModelConfig& model,
                     const Sequence& sequence, const LossConfig& loss);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& records);

// Binary checkpoint: "RFCK", u32 version, u64 count, then per parameter
// u32 path length, path bytes, u32 rank, u64 extents, little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params);
// Loads values into an already-registered store; names and shapes must match.
void load_checkpoint(const std::filesystem::path& path, ParameterStore& params);

}  // namespace rayfusion
