// Acceptance suite: one PASS/FAIL line per criterion. Run a single criterion
// with --criterion N, or all of them without arguments.

#include <sys/wait.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "../test_util.hpp"
#include "rayfusion/harness.hpp"
#include "rayfusion/ops.hpp"
#include "rayfusion/synth_scene.hpp"
#include "rayfusion/training.hpp"

using namespace rayfusion;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), fmt, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Small scene-range model shared by the training criteria.
ModelConfig desk_model(FusionMode mode) {
  ModelConfig m;
  m.plane_count = 8;
  m.channels = 8;
  m.d_min = 1.0;
  m.d_max = 5.0;
  m.refinement = false;
  m.mode = mode;
  return m;
}

std::vector<std::size_t> every(std::size_t interval, std::size_t count) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= count; ++k) out.push_back(k * interval);
  return out;
}

// Same frames with a fresh sparse draw at `density`.
Sequence resampled(const Sequence& seq, double density, std::uint64_t seed) {
  Sequence out = seq;
  const std::size_t count =
      sparse_count_for_density(seq.intrinsics.width, seq.intrinsics.height, density);
  for (std::size_t f = 0; f < out.frames.size(); ++f) {
    out.frames[f].sparse = sample_sparse(out.frames[f].gt, count, 1000 + seed * 10 + f);
  }
  return out;
}

double mean_mae(const ParameterStore& params, const ModelConfig& model, const Sequence& seq,
                std::size_t first_frame) {
  const auto metrics = evaluate_sequence(params, model, seq, {model.d_min, model.d_max});
  double sum = 0.0;
  for (std::size_t f = first_frame; f < metrics.size(); ++f) sum += metrics[f].mae;
  return sum / static_cast<double>(metrics.size() - first_frame);
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  RunConfig config;
  config.model.plane_count = 4;
  config.model.channels = 4;
  config.model.d_min = 1.0;
  config.model.d_max = 5.0;
  config.model.refinement = true;
  config.loss = {true, true, true, true};
  const auto start = std::chrono::steady_clock::now();
  const GradcheckReport r = run_gradcheck(config, 1e-5);
  const double elapsed = seconds_since(start);
  const bool pass = r.result.max_relative_error < 1e-4 && elapsed < 300.0 && r.frames == 2;
  return {pass, format("max relative error %.3e over %zu entries (worst %s[%zu]), %zu frames, %.1f s",
                       r.result.max_relative_error, r.result.entries_checked,
                       r.result.worst_parameter.c_str(), r.result.worst_index, r.frames, elapsed)};
}

Outcome normalization_suite() {
  // Probability volumes produced by the full pipeline on rendered frames.
  double worst_ray = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ModelConfig m = desk_model(FusionMode::kFused);
    const ParameterStore params = make_parameters(m, seed);
    const Sequence clip = synthetic_clip(32, 32, 3, 0.01, seed);
    for (const FrameOutput& out : infer_sequence(params, m, clip)) {
      const Tensor& p = out.probabilities.probs;
      const std::size_t d = p.size(0), plane = p.size(1) * p.size(2);
      for (std::size_t q = 0; q < plane; ++q) {
        double total = 0.0;
        for (std::size_t i = 0; i < d; ++i) total += p.data()[i * plane + q];
        worst_ray = std::max(worst_ray, std::fabs(total - 1.0));
      }
    }
  }

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst_label = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t count = 2 + rng() % 63;
    const double lo = 0.05 + 2.0 * unit(rng);
    const DepthPlaneSet planes = make_planes(count, lo, lo + 0.1 + 20.0 * unit(rng));
    const double depth = planes.d_min + unit(rng) * (planes.d_max - planes.d_min);
    const auto label = soft_label(depth, planes);
    double mean = 0.0;
    for (std::size_t k = 0; k < count; ++k) mean += label[k] * planes.depths[k];
    worst_label = std::max(worst_label, std::fabs(mean - depth));
  }

  std::size_t gibbs_violations = 0;
  double tightest = 1e300;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t count = 2 + rng() % 15;
    const DepthPlaneSet planes = make_planes(count, 1.0, 5.0);
    std::vector<double> p(count);
    double total = 0.0;
    for (double& v : p) total += (v = 1e-4 + unit(rng));
    for (double& v : p) v /= total;
    const double depth = 1.0 + 4.0 * unit(rng);
    const auto label = soft_label(depth, planes);
    double entropy = 0.0;
    for (double q : label) entropy -= q > 0.0 ? q * std::log(q) : 0.0;
    const double ce =
        ce_loss({planes, Tensor::from_data({count, 1, 1}, p)},
                SparseDepthMap::from_values(1, 1, {depth}))
            .item();
    tightest = std::min(tightest, ce - entropy);
    if (ce < entropy - 1e-12) ++gibbs_violations;
  }
  const bool pass = worst_ray < 1e-9 && worst_label < 1e-9 && gibbs_violations == 0;
  return {pass, format("ray sum error %.2e, soft-label mean error %.2e over 1e4 draws, "
                       "%zu Gibbs violations over 1e4 pairs (min CE - H = %.2e)",
                       worst_ray, worst_label, gibbs_violations, tightest)};
}

Outcome geometry_suite() {
  const std::size_t d = 4, c = 3, h = 6, w = 6;
  CameraIntrinsics k;
  k.fx = k.fy = 4.5;
  k.cx = k.cy = 3.0;
  k.width = w;
  k.height = h;
  const DepthPlaneSet planes = make_planes(d, 1.0, 4.0);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto random_volume = [&] {
    std::vector<double> v(d * c * h * w);
    for (double& x : v) x = unit(rng);
    return Tensor::from_data({d, c, h, w}, std::move(v));
  };

  const Tensor x = random_volume();
  const Tensor same = align_volume(x, Pose::identity(), k, planes).features;
  double identity_error = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    identity_error = std::max(identity_error, std::fabs(same.data()[i] - x.data()[i]));
  }

  double linearity_error = 0.0, oracle_error = 0.0;
  std::size_t valid_samples = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Pose pose;
    const Eigen::Vector3d axis(unit(rng), unit(rng), unit(rng));
    pose.rotation = axis_angle(axis.normalized(), 0.08 * unit(rng));
    pose.translation = 0.15 * Eigen::Vector3d(unit(rng), unit(rng), unit(rng));

    const Tensor a = random_volume(), b = random_volume();
    const double alpha = unit(rng), beta = unit(rng);
    const Tensor mix = ops::add(ops::mul_scalar(a, alpha), ops::mul_scalar(b, beta));
    const AlignedVolume wa = align_volume(a, pose, k, planes);
    const Tensor wb = align_volume(b, pose, k, planes).features;
    const Tensor wm = align_volume(mix, pose, k, planes).features;
    for (std::size_t i = 0; i < wm.numel(); ++i) {
      linearity_error = std::max(
          linearity_error,
          std::fabs(wm.data()[i] - alpha * wa.features.data()[i] - beta * wb.data()[i]));
    }
    const auto expected = rftest::warp_oracle(rftest::values(a), d, c, h, w, pose.rotation,
                                              pose.translation, {k.fx, k.fy, k.cx, k.cy},
                                              planes.depths);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      oracle_error = std::max(oracle_error, std::fabs(wa.features.data()[i] - expected[i]));
    }
    valid_samples += std::count(wa.valid.begin(), wa.valid.end(), 1);
  }
  const bool pass = identity_error < 1e-12 && linearity_error < 1e-9 && oracle_error < 1e-9 &&
                    valid_samples > 0;
  return {pass, format("identity error %.2e, linearity error %.2e, oracle error %.2e "
                       "(20 poses, %zu in-frustum voxels)",
                       identity_error, linearity_error, oracle_error, valid_samples)};
}

Outcome attention_complexity() {
  std::vector<std::string> problems;
  // Measured per-chunk and per-frame score storage on the ray path.
  const std::size_t d = 6, c = 4, h = 4, w = 5;
  for (std::size_t chunk : {1u, 3u, 7u, 20u}) {
    ParameterStore params;
    register_fusion(params, c);
    init_glorot_uniform(params, chunk);
    std::mt19937_64 rng(chunk);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<double> a(d * c * h * w), b(a.size());
    for (double& v : a) v = unit(rng);
    for (double& v : b) v = unit(rng);
    const DepthPlaneSet planes = make_planes(d, 1.0, 2.0);
    const CostVolume cur{planes, Tensor::from_data({d, c, h, w}, a), {}};
    const CostVolume prev{planes, Tensor::from_data({d, c, h, w}, b), {}};
    FusionConfig cfg;
    cfg.ray_chunk = chunk;
    auto& tracker = attention_score_tracker();
    NoGradGuard no_grad;
    tracker.reset();
    fuse_volumes(cur, &prev, params, cfg);
    const std::size_t in_flight = std::min(chunk, h * w);
    if (tracker.peak_bytes() != in_flight * d * d * sizeof(double)) {
      problems.push_back(format("chunk %zu peak %zu B", chunk, tracker.peak_bytes()));
    }
    // Three attention stages per fused frame, each D^2 per ray.
    if (tracker.total_entries() != 3 * d * d * h * w) {
      problems.push_back(format("chunk %zu total %zu", chunk, tracker.total_entries()));
    }
  }

  BenchmarkOptions opts;
  opts.depths = {4, 8, 16};
  opts.heights = {4, 8};
  opts.widths = {4, 8};
  opts.channels = 8;
  opts.repeats = 1;
  const auto rows = run_benchmark(opts);
  std::size_t ratio_rows = 0;
  double big_ratio = 0.0;
  bool big_ray_ran = false, big_naive_ran = false;
  for (std::size_t i = 0; i + 1 < rows.size(); i += 2) {
    const BenchmarkRow& ray = rows[i];
    const BenchmarkRow& naive = rows[i + 1];
    if (naive.entries != ray.entries * ray.h * ray.w) {
      problems.push_back(format("ratio off at D=%zu %zux%zu", ray.d, ray.h, ray.w));
    }
    if (ray.executed && ray.peak_bytes != ray.d * ray.d * ray.h * ray.w * sizeof(double)) {
      problems.push_back(format("ray peak off at D=%zu %zux%zu", ray.d, ray.h, ray.w));
    }
    ++ratio_rows;
    if (ray.d == 16 && ray.h == 8 && ray.w == 8) {
      big_ray_ran = ray.executed;
      big_naive_ran = naive.executed;
      if (ray.executed && naive.executed) {
        big_ratio = static_cast<double>(naive.total_entries) / static_cast<double>(ray.total_entries);
      }
    }
  }
  if (!big_ray_ran || !big_naive_ran) problems.push_back("D=16 8x8 rows did not run");
  if (big_ratio != 64.0) problems.push_back(format("D=16 8x8 measured ratio %.2f", big_ratio));

  std::string detail = format("%zu benchmark rows with naive/ray = H'W', D=16 8x8 naive/ray "
                              "measured %.0fx",
                              ratio_rows, big_ratio);
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty(), detail};
}

struct OverfitRun {
  double mae_fraction = 0.0;
  std::size_t window_increases = 0;
  double seconds = 0.0;
};

// One 32x32 frame, 1% sparse input, 500 steps with the rate halved every 50.
OverfitRun overfit(bool with_l1, std::uint64_t seed) {
  const ModelConfig m = desk_model(FusionMode::kFused);
  const Sequence clip = synthetic_clip(32, 32, 1, 0.01, seed);
  ParameterStore params = make_parameters(m, seed);
  TrainingOptions opts;
  opts.epochs = 500;
  opts.loss.l1 = with_l1;
  opts.loss.ce = true;
  opts.loss.spn_l1 = false;
  opts.optimizer.learning_rate = 1e-3;
  opts.optimizer.milestones = every(50, 9);
  const auto start = std::chrono::steady_clock::now();
  const TrainingResult r = train_sequences(params, m, {clip}, opts);
  OverfitRun run;
  run.seconds = seconds_since(start);
  double previous = 1e300;
  for (std::size_t win = 0; win + 10 <= r.records.size(); win += 10) {
    double mean = 0.0;
    for (std::size_t i = win; i < win + 10; ++i) mean += r.records[i].l1;
    mean /= 10.0;
    if (mean > previous) ++run.window_increases;
    previous = mean;
  }
  run.mae_fraction = mean_mae(params, m, clip, 0) / (m.d_max - m.d_min);
  return run;
}

Outcome overfit_test() {
  const OverfitRun r = overfit(true, 0);
  const bool pass = r.mae_fraction < 0.02 && r.window_increases == 0 && r.seconds < 600.0;
  return {pass, format("final MAE %.3f%% of the plane range, %zu rising 10-step windows, %.1f s",
                       100.0 * r.mae_fraction, r.window_increases, r.seconds)};
}

// The four default scenes, 64x48, eight frames each.
std::vector<Sequence> desk_sequences(double density) {
  std::vector<Sequence> out;
  for (std::uint64_t s = 0; s < 4; ++s) out.push_back(synthetic_clip(64, 48, 8, density, s));
  return out;
}

ParameterStore train_desk_model(const ModelConfig& m, const std::vector<Sequence>& sequences) {
  ParameterStore params = make_parameters(m, 0);
  TrainingOptions opts;
  opts.epochs = 60;
  opts.loss.spn_l1 = false;
  opts.optimizer.milestones = every(800, 20);
  train_sequences(params, m, sequences, opts);
  return params;
}

Outcome fusion_benefit() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<Sequence> train = desk_sequences(0.001);
  double mae[2][4];
  for (int fused = 0; fused < 2; ++fused) {
    const ModelConfig m = desk_model(fused ? FusionMode::kFused : FusionMode::kSingleView);
    const ParameterStore params = train_desk_model(m, train);
    for (std::size_t s = 0; s < 4; ++s) {
      mae[fused][s] = mean_mae(params, m, resampled(train[s], 0.001, s), 1);
    }
  }
  std::size_t wins = 0;
  double improvement = 0.0;
  std::string per_seed;
  for (std::size_t s = 0; s < 4; ++s) {
    wins += mae[1][s] <= mae[0][s];
    improvement += (mae[0][s] - mae[1][s]) / mae[0][s] / 4.0;
    per_seed += format(" s%zu %.4f/%.4f", s, mae[1][s], mae[0][s]);
  }
  const double elapsed = seconds_since(start);
  const bool pass = wins >= 3 && improvement >= 0.0 && elapsed < 3600.0;
  return {pass, format("fused wins %zu/4, mean relative improvement %.1f%% (fused/single MAE:%s), "
                       "%.0f s",
                       wins, 100.0 * improvement, per_seed.c_str(), elapsed)};
}

Outcome sparsity_robustness() {
  const ModelConfig m = desk_model(FusionMode::kFused);
  const std::vector<Sequence> train = desk_sequences(0.005);
  const ParameterStore params = train_desk_model(m, train);
  auto mae_at = [&](double density) {
    double sum = 0.0;
    for (std::size_t s = 0; s < 4; ++s) sum += mean_mae(params, m, resampled(train[s], density, s), 0);
    return sum / 4.0;
  };
  const double base = mae_at(0.005), mid = mae_at(0.0015), low = mae_at(0.0005);
  const bool pass = mid / base < 3.0 && low / base < 5.0;
  return {pass, format("MAE %.4f at 0.5%%, %.4f at 0.15%% (%.2fx), %.4f at 0.05%% (%.2fx)", base,
                       mid, mid / base, low, low / base)};
}

Outcome loss_ablation() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {0u, 1u}) {
    const OverfitRun both = overfit(true, seed);
    const OverfitRun ce_only = overfit(false, seed);
    pass = pass && both.mae_fraction <= ce_only.mae_fraction;
    detail += format("%sseed %llu: CE+L1 %.3f%% vs CE %.3f%% of range", seed ? "; " : "",
                     static_cast<unsigned long long>(seed), 100.0 * both.mae_fraction,
                     100.0 * ce_only.mae_fraction);
  }
  return {pass, detail};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "rayfusion_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  SceneSpec spec = default_scene(5);
  spec.trajectory.frame_count = 3;
  write_synthetic_sequence(dir / "seq", spec, default_intrinsics(32, 32));

  RunConfig config;
  config.model = desk_model(FusionMode::kFused);
  config.model.refinement = true;
  config.epochs = 2;
  config.sequences = {dir / "seq"};
  config.sparse_density = 0.01;
  config.checkpoint = dir / "model.rfck";
  config.output = dir / "train";
  run_training(config);
  {
    std::ofstream(dir / "run.json") << config_to_json(config);
  }

  const std::string cli = RAYFUSION_CLI;
  std::vector<std::string> snapshots;
  for (const char* out : {"a", "b"}) {
    const std::string cmd = cli + " infer --config " + (dir / "run.json").string() + " --out " +
                            (dir / out).string() + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      return {false, format("infer exited with status %d", status)};
    }
  }
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const fs::path twin = dir / "b" / fs::relative(entry.path(), dir / "a");
    if (!fs::exists(twin) || slurp(entry.path()) != slurp(twin)) ++differing;
  }
  std::size_t files_b = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "b")) files_b += entry.is_regular_file();
  fs::remove_all(dir);
  const bool pass = files > 0 && differing == 0 && files == files_b;
  return {pass, format("%zu output files compared, %zu differ", files, differing)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "normalization suite", normalization_suite},
      {3, "geometry suite", geometry_suite},
      {4, "attention complexity", attention_complexity},
      {5, "overfit", overfit_test},
      {6, "fusion benefit", fusion_benefit},
      {7, "sparsity robustness", sparsity_robustness},
      {8, "loss ablation", loss_ablation},
      {9, "determinism", determinism},
  };
  bool all_pass = true;
  for (const Criterion& c : criteria) {
    if (only && c.id != only) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d (%s): %s - %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
    all_pass = all_pass && o.pass;
  }
  return all_pass ? 0 : 1;
}
