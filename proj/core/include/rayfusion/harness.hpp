#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rayfusion/parameters.hpp"
#include "rayfusion/pipeline.hpp"
#include "rayfusion/training.hpp"

namespace rayfusion {

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  OptimizerConfig optimizer;
  std::size_t epochs = 1;
  bool bptt = false;

  std::vector<std::filesystem::path> sequences;
  double sparse_density = 0.001;
  // Evaluation depth range; unset means [d_min, d_max].
  std::optional<std::pair<double, double>> eval_range;

  std::uint64_t seed = 0;
  std::filesystem::path checkpoint = "checkpoint.rfck";
  std::filesystem::path output = "out";

  void validate() const;
  std::pair<double, double> evaluation_range() const;
};

// Missing keys keep their defaults; unknown keys, type errors and invariant
// violations raise ConfigError naming the key path.
RunConfig config_from_json(const std::string& text);
std::string config_to_json(const RunConfig& config);
// Reads a config file; relative sequence, checkpoint and output paths given
// in it are resolved against the file's directory.
RunConfig parse_config(const std::filesystem::path& path);

// Reads a sequence directory written by write_synthetic_sequence. Sparse
// input comes from sparse_%04d.pfm when present, otherwise it is sampled
// from the ground truth at `sparse_density` with a per-frame seed derived
// from `seed`.
Sequence load_sequence(const std::filesystem::path& dir, double sparse_density,
                       std::uint64_t seed);

struct DepthMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double imae = 0.0;
  double irmse = 0.0;
  std::size_t pixels = 0;
};

// Over valid ground-truth pixels with depth inside [range.first, range.second].
// Predictions are clamped to >= 1e-6 before inversion.
DepthMetrics compute_metrics(const Tensor& pred, const SparseDepthMap& gt,
                             std::pair<double, double> range);

// Streams a sequence through the model without recording gradients.
std::vector<FrameOutput> infer_sequence(const ParameterStore& params, const ModelConfig& model,
                                        const Sequence& sequence);

std::vector<DepthMetrics> evaluate_sequence(const ParameterStore& params,
                                            const ModelConfig& model, const Sequence& sequence,
                                            std::pair<double, double> range);

// Trains on every configured sequence, writes the checkpoint and
// `output`/loss.csv.
TrainingResult run_training(const RunConfig& config);

struct InferenceReport {
  std::vector<DepthMetrics> frames;  // all sequences, in order
  DepthMetrics mean;
};

// Loads the checkpoint and writes, per sequence, depth_%04d.pfm and
// confidence_%04d.pfm under `output`/seqNN/ plus `output`/metrics.csv.
InferenceReport run_inference(const RunConfig& config);

struct BenchmarkOptions {
  std::vector<std::size_t> depths{16};
  std::vector<std::size_t> heights{8};
  std::vector<std::size_t> widths{8};
  std::size_t channels = 8;
  std::size_t repeats = 3;
  std::size_t ray_chunk = 0;
  std::uint64_t naive_entry_cap = std::uint64_t{1} << 26;
  std::uint64_t seed = 0;
};

struct BenchmarkRow {
  std::string mode;
  std::size_t d = 0, h = 0, w = 0, c = 0;
  std::uint64_t entries = 0;      // analytic, per attention stage
  std::uint64_t peak_bytes = 0;   // measured live score storage
  std::uint64_t total_entries = 0;  // measured over one fused frame
  double wall_ms = 0.0;           // median over repeats
  bool executed = false;
};

std::vector<BenchmarkRow> run_benchmark(const BenchmarkOptions& options);
void write_benchmark_csv(const std::filesystem::path& path, const std::vector<BenchmarkRow>& rows);

struct GradcheckReport {
  GradientCheckResult result;
  std::size_t parameters = 0;
  std::size_t frames = 0;
};

// Full-pipeline gradient check over the first two frames of the first
// configured sequence (or a rendered 16 x 16 clip when none is set), with the
// carried volume kept in the graph.
GradcheckReport run_gradcheck(const RunConfig& config, double step = 1e-5);

// Two-frame clip of the default scene for gradient checks and smoke tests.
Sequence synthetic_clip(std::size_t width, std::size_t height, std::size_t frames,
                        double sparse_density, std::uint64_t seed);

}  // namespace rayfusion
