#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rayfusion/errors.hpp"
#include "rayfusion/harness.hpp"
#include "rayfusion/synth_scene.hpp"

using namespace rayfusion;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const char* name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string config_error(const std::string& text) {
  try {
    config_from_json(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsWhenEmpty) {
  const RunConfig c = config_from_json("{}");
  EXPECT_EQ(c.model.plane_count, 16u);
  EXPECT_EQ(c.model.mode, FusionMode::kFused);
  EXPECT_DOUBLE_EQ(c.sparse_density, 0.001);
  EXPECT_EQ(c.checkpoint, "checkpoint.rfck");
  EXPECT_EQ(c.evaluation_range(), std::make_pair(c.model.d_min, c.model.d_max));
}

TEST(Config, RoundTripsThroughJson) {
  RunConfig c = config_from_json(R"({
    "planes": {"count": 8, "d_min": 1.0, "d_max": 5.0},
    "channels": 8, "image_channels": 6, "downscale": 2,
    "mode": "single_view", "refinement": false, "refine_iterations": 3,
    "loss": {"l1": true, "ce": false, "l2": true, "spn_l1": false},
    "optimizer": {"learning_rate": 0.002, "weight_decay": 0.0, "milestones": [10, 20],
                  "epochs": 4, "bptt": true},
    "fusion": {"residual": false, "heads": 2, "mask_invalid": true, "ray_chunk": 16},
    "data": {"sparse_density": 0.005, "eval_range": [1.5, 4.5]},
    "seed": 9, "checkpoint": "m.rfck", "output": "res"
  })");
  EXPECT_EQ(c.model.plane_count, 8u);
  EXPECT_EQ(c.model.mode, FusionMode::kSingleView);
  EXPECT_EQ(c.optimizer.milestones, (std::vector<std::size_t>{10, 20}));
  EXPECT_TRUE(c.bptt);
  EXPECT_EQ(c.model.fusion.heads, 2u);
  EXPECT_EQ(c.evaluation_range(), std::make_pair(1.5, 4.5));
  const RunConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_NE(config_error(R"({"loss": {"l3": true}})").find("loss.l3"), std::string::npos);
  EXPECT_NE(config_error(R"({"colour": 1})").find("colour"), std::string::npos);
}

TEST(Config, TypeAndInvariantErrors) {
  EXPECT_NE(config_error(R"({"channels": "eight"})").find("channels"), std::string::npos);
  EXPECT_NE(config_error(R"({"planes": {"count": 1}})"), "");
  EXPECT_NE(config_error(R"({"mode": "stereo"})").find("mode"), std::string::npos);
  EXPECT_NE(config_error(R"({"loss": {"l1": false, "ce": false, "spn_l1": false}})"), "");
  EXPECT_NE(config_error(R"({"data": {"sparse_density": 0}})").find("sparse_density"),
            std::string::npos);
  EXPECT_NE(config_error("[1, 2"), "");
}

TEST(Config, RelativeSequencePathsResolveAgainstConfigFile) {
  const fs::path dir = fresh_dir("rayfusion_config_test");
  fs::create_directories(dir / "seq0");
  std::ofstream(dir / "run.json") << R"({"data": {"sequences": ["seq0", ")" << dir.string()
                                  << R"("]}, "checkpoint": "m.rfck"})";
  const RunConfig c = parse_config(dir / "run.json");
  EXPECT_EQ(c.checkpoint, dir / "m.rfck");
  EXPECT_EQ(c.output, "out");
  ASSERT_EQ(c.sequences.size(), 2u);
  EXPECT_EQ(c.sequences[0], dir / "seq0");
  EXPECT_EQ(c.sequences[1], dir);
  EXPECT_THROW(parse_config(dir / "missing.json"), ConfigError);
  fs::remove_all(dir);
}

TEST(Metrics, HandValues) {
  const Tensor pred = Tensor::from_data({1, 4}, {2.0, 4.0, 1.0, 9.0});
  const SparseDepthMap gt = SparseDepthMap::from_values(4, 1, {1.0, 2.0, 0.0, 100.0});
  const DepthMetrics m = compute_metrics(pred, gt, {0.5, 10.0});
  EXPECT_EQ(m.pixels, 2u);
  EXPECT_DOUBLE_EQ(m.mae, 1.5);
  EXPECT_DOUBLE_EQ(m.rmse, std::sqrt(2.5));
  EXPECT_DOUBLE_EQ(m.imae, 0.375);
  EXPECT_DOUBLE_EQ(m.irmse, std::sqrt((0.25 + 0.0625) / 2));
  EXPECT_THROW(compute_metrics(pred, gt, {50.0, 60.0}), EmptySupervisionError);
}

TEST(Metrics, PerfectPredictionScoresZero) {
  const SparseDepthMap gt = SparseDepthMap::from_values(2, 2, {1.0, 2.0, 3.0, 4.0});
  const DepthMetrics m = compute_metrics(gt.depth_tensor(), gt, {0.0, 10.0});
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.irmse, 0.0);
}

TEST(Sequences, LoadMatchesWrittenFrames) {
  const fs::path dir = fresh_dir("rayfusion_load_test");
  SceneSpec spec = default_scene(4);
  spec.trajectory.frame_count = 3;
  write_synthetic_sequence(dir, spec, default_intrinsics(32, 24));
  const Sequence s = load_sequence(dir, 0.01, 7);
  ASSERT_EQ(s.frames.size(), 3u);
  EXPECT_EQ(s.intrinsics.width, 32u);
  const RenderedFrame f1 = render_frame(spec, 1, default_intrinsics(32, 24));
  for (std::size_t i = 0; i < f1.depth.depth.size(); ++i) {
    EXPECT_NEAR(s.frames[1].gt.depth[i], f1.depth.depth[i], 1e-6 * f1.depth.depth[i]);
  }
  EXPECT_EQ(s.frames[1].sparse.valid_count(), sparse_count_for_density(32, 24, 0.01));
  EXPECT_EQ(load_sequence(dir, 0.01, 7).frames[2].sparse.depth, s.frames[2].sparse.depth);
  EXPECT_LT((s.frames[2].pose.translation - f1.pose.translation).norm(), 0.051);
  EXPECT_THROW(load_sequence(dir / "nope", 0.01, 7), Error);
  fs::remove_all(dir);
}

TEST(Benchmark, RowsReportAnalyticAndMeasuredCounts) {
  BenchmarkOptions opts;
  opts.depths = {4};
  opts.heights = {2, 4};
  opts.widths = {4};
  opts.channels = 4;
  opts.repeats = 1;
  const auto rows = run_benchmark(opts);
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    const BenchmarkRow& ray = rows[i];
    const BenchmarkRow& naive = rows[i + 1];
    EXPECT_EQ(ray.mode, "ray");
    EXPECT_EQ(naive.mode, "naive");
    EXPECT_EQ(naive.entries, ray.entries * ray.h * ray.w);
    EXPECT_EQ(ray.peak_bytes, ray.entries * sizeof(double));
    EXPECT_TRUE(ray.executed);
    EXPECT_TRUE(naive.executed);
  }
  const fs::path csv = fs::temp_directory_path() / "rayfusion_bench.csv";
  write_benchmark_csv(csv, rows);
  const std::string text = slurp(csv);
  EXPECT_EQ(text.substr(0, text.find('\n')), "mode,D,H,W,C,entries,peak_bytes,wall_ms,executed");
  fs::remove(csv);
}

TEST(Benchmark, NaiveRowsOverCapAreSkipped) {
  BenchmarkOptions opts;
  opts.depths = {4};
  opts.heights = {4};
  opts.widths = {4};
  opts.channels = 4;
  opts.repeats = 1;
  opts.naive_entry_cap = 100;
  const auto rows = run_benchmark(opts);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].executed);
  EXPECT_FALSE(rows[1].executed);
  EXPECT_EQ(rows[1].peak_bytes, 0u);
}

#ifdef RAYFUSION_CLI
namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RAYFUSION_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const fs::path dir = fresh_dir("rayfusion_cli_codes");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train"), 2);
  EXPECT_EQ(run_cli("bench --repeats 0"), 2);
  std::ofstream(dir / "bad.json") << R"({"optimiser": {}})";
  EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string()), 2);
  std::ofstream(dir / "nodata.json") << R"({"checkpoint": "x.rfck"})";
  EXPECT_EQ(run_cli("infer --config " + (dir / "nodata.json").string()), 2);
  std::ofstream(dir / "nosuchdir.json") << R"({"data": {"sequences": ["does_not_exist"]}})";
  EXPECT_EQ(run_cli("infer --config " + (dir / "nosuchdir.json").string()), 2);
  std::ofstream(dir / "nockpt.json") << R"({"data": {"sequences": ["."]}, "checkpoint": "x.rfck"})";
  EXPECT_EQ(run_cli("infer --config " + (dir / "nockpt.json").string()), 1);
  fs::remove_all(dir);
}

TEST(Cli, SynthTrainInferEndToEnd) {
  const fs::path dir = fresh_dir("rayfusion_cli_e2e");
  ASSERT_EQ(run_cli("synth --seed 3 --frames 2 --width 16 --height 16 --out " +
                    (dir / "seq").string()),
            0);
  std::ofstream(dir / "run.json") << R"({
    "planes": {"count": 4, "d_min": 1.0, "d_max": 5.0},
    "channels": 4, "image_channels": 6,
    "optimizer": {"epochs": 1},
    "data": {"sequences": ["seq"], "sparse_density": 0.05},
    "checkpoint": "model.rfck", "output": "out"
  })";
  const std::string cfg = (dir / "run.json").string();
  ASSERT_EQ(run_cli("train --config " + cfg + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "loss.csv"));
  ASSERT_EQ(run_cli("infer --config " + cfg + " --out " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "seq00" / "depth_0001.pfm"));
  EXPECT_TRUE(fs::exists(dir / "out" / "seq00" / "confidence_0000.pfm"));
  EXPECT_EQ(run_cli("bench --depths 4 --heights 2 --widths 2 --channels 4 --repeats 1 --out " +
                    (dir / "bench.csv").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "bench.csv"));
  fs::remove_all(dir);
}
#endif
