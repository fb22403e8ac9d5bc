#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rayfusion/errors.hpp"
#include "rayfusion/harness.hpp"
#include "rayfusion/synth_scene.hpp"

namespace fs = std::filesystem;
using namespace rayfusion;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  bool no_refine = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool needs_config) {
  auto* opt = cmd->add_option("--config", flags.config, "Run configuration (JSON)");
  if (needs_config) opt->required();
  cmd->add_option("--seed", flags.seed, "Override the configured seed");
  cmd->add_option("--out", flags.out, "Override the output directory");
  cmd->add_option("--mode", flags.mode, "fused or single_view")
      ->check(CLI::IsMember({"fused", "single_view"}));
  cmd->add_flag("--no-refine", flags.no_refine, "Disable depth refinement");
}

RunConfig load_run_config(const CommonFlags& flags) {
  RunConfig config = flags.config.empty() ? RunConfig{} : parse_config(flags.config);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.output = flags.out;
  if (flags.mode == "fused") config.model.mode = FusionMode::kFused;
  if (flags.mode == "single_view") config.model.mode = FusionMode::kSingleView;
  if (flags.no_refine) config.model.refinement = false;
  config.validate();
  return config;
}

void print_metrics(const char* label, const DepthMetrics& m) {
  std::printf("%s mae=%.6f rmse=%.6f imae=%.6f irmse=%.6f\n", label, m.mae, m.rmse, m.imae,
              m.irmse);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth completion with ray-wise cost-volume fusion"};
  app.require_subcommand(1);

  CommonFlags synth_flags;
  std::size_t width = 64, height = 48;
  std::optional<std::size_t> frames;
  auto* synth = app.add_subcommand("synth", "Render a synthetic RGB-D sequence");
  synth->add_option("--config", synth_flags.config, "Scene description (JSON)");
  synth->add_option("--seed", synth_flags.seed, "Scene seed when no config is given");
  synth->add_option("--out", synth_flags.out, "Sequence directory")->required();
  synth->add_option("--width", width, "Image width")->check(CLI::PositiveNumber);
  synth->add_option("--height", height, "Image height")->check(CLI::PositiveNumber);
  synth->add_option("--frames", frames, "Override the trajectory length")
      ->check(CLI::PositiveNumber);

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "Train on the configured sequences");
  add_common(train, train_flags, true);

  CommonFlags infer_flags;
  auto* infer = app.add_subcommand("infer", "Run a checkpoint over the configured sequences");
  add_common(infer, infer_flags, true);

  BenchmarkOptions bench_opts;
  std::string bench_out = "bench.csv";
  auto* bench = app.add_subcommand("bench", "Ray-wise vs naive attention memory benchmark");
  bench->add_option("--depths", bench_opts.depths, "Plane counts")->delimiter(',');
  bench->add_option("--heights", bench_opts.heights, "Volume heights")->delimiter(',');
  bench->add_option("--widths", bench_opts.widths, "Volume widths")->delimiter(',');
  bench->add_option("--channels", bench_opts.channels, "Feature channels");
  bench->add_option("--repeats", bench_opts.repeats, "Timed runs per size")
      ->check(CLI::PositiveNumber);
  bench->add_option("--ray-chunk", bench_opts.ray_chunk, "Rays per attention call (0 = all)");
  bench->add_option("--seed", bench_opts.seed, "Seed for random volumes and weights");
  bench->add_option("--out", bench_out, "CSV report path");

  CommonFlags grad_flags;
  double step = 1e-5;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full pipeline");
  add_common(grad, grad_flags, false);
  grad->add_option("--step", step, "Central-difference step")->check(CLI::Range(1e-7, 1e-3));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*synth) {
      SceneSpec spec = synth_flags.config.empty() ? default_scene(synth_flags.seed.value_or(0))
                                                  : read_scene_file(synth_flags.config);
      if (frames) spec.trajectory.frame_count = *frames;
      write_synthetic_sequence(synth_flags.out, spec, default_intrinsics(width, height));
      std::printf("wrote %zu frames to %s\n", spec.trajectory.frame_count,
                  synth_flags.out.c_str());
    } else if (*train) {
      const RunConfig config = load_run_config(train_flags);
      const TrainingResult result = run_training(config);
      for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
        std::printf("epoch %zu loss %.6f\n", e, result.epoch_loss[e]);
      }
      std::printf("checkpoint %s\n", config.checkpoint.c_str());
    } else if (*infer) {
      const RunConfig config = load_run_config(infer_flags);
      const InferenceReport report = run_inference(config);
      print_metrics("mean", report.mean);
    } else if (*bench) {
      const auto rows = run_benchmark(bench_opts);
      write_benchmark_csv(bench_out, rows);
      for (const BenchmarkRow& r : rows) {
        if (r.executed) {
          std::printf("%-5s D=%zu H=%zu W=%zu entries=%llu peak_bytes=%llu wall_ms=%.3f\n",
                      r.mode.c_str(), r.d, r.h, r.w, static_cast<unsigned long long>(r.entries),
                      static_cast<unsigned long long>(r.peak_bytes), r.wall_ms);
        } else {
          std::printf("%-5s D=%zu H=%zu W=%zu entries=%llu (over cap, not executed)\n",
                      r.mode.c_str(), r.d, r.h, r.w, static_cast<unsigned long long>(r.entries));
        }
      }
    } else if (*grad) {
      const RunConfig config = load_run_config(grad_flags);
      const GradcheckReport report = run_gradcheck(config, step);
      std::printf("max_relative_error %.3e over %zu entries (%zu frames), worst %s[%zu]\n",
                  report.result.max_relative_error, report.result.entries_checked, report.frames,
                  report.result.worst_parameter.c_str(), report.result.worst_index);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ParameterError& e) {
    std::cerr << "invalid parameter: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
