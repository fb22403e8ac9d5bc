#include "rayfusion/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "json_fields.hpp"
#include "rayfusion/errors.hpp"
#include "rayfusion/synth_scene.hpp"

namespace rayfusion {

namespace {

using detail::Json;
using detail::read_field;
using detail::reject_unknown_keys;

constexpr double kMinInversionDepth = 1e-6;
constexpr double kClipDensity = 0.05;

std::string numbered(const char* stem, std::size_t index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", stem, index, ext);
  return buf;
}

std::uint64_t frame_seed(std::uint64_t seed, std::size_t frame) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(frame)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

DepthMetrics mean_metrics(const std::vector<DepthMetrics>& frames) {
  DepthMetrics mean;
  if (frames.empty()) return mean;
  for (const DepthMetrics& m : frames) {
    mean.mae += m.mae;
    mean.rmse += m.rmse;
    mean.imae += m.imae;
    mean.irmse += m.irmse;
    mean.pixels += m.pixels;
  }
  const double n = static_cast<double>(frames.size());
  mean.mae /= n;
  mean.rmse /= n;
  mean.imae /= n;
  mean.irmse /= n;
  return mean;
}

void write_metrics_row(std::ostream& out, const std::string& seq, const std::string& frame,
                       const DepthMetrics& m) {
  out << seq << ',' << frame << ',' << m.mae << ',' << m.rmse << ',' << m.imae << ','
      << m.irmse << ',' << m.pixels << '\n';
}

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    loss.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("'optimizer.learning_rate' must be positive");
  if (optimizer.weight_decay < 0.0) throw ConfigError("'optimizer.weight_decay' must be non-negative");
  if (!(sparse_density > 0.0 && sparse_density <= 1.0)) {
    throw ConfigError("'data.sparse_density' must lie in (0, 1]");
  }
  if (eval_range && !(eval_range->first >= 0.0 && eval_range->first < eval_range->second)) {
    throw ConfigError("'data.eval_range' must be an increasing pair");
  }
  for (const auto& dir : sequences) {
    if (!std::filesystem::is_directory(dir)) {
      throw ConfigError("'data.sequences': no such directory " + dir.string());
    }
  }
}

std::pair<double, double> RunConfig::evaluation_range() const {
  return eval_range.value_or(std::make_pair(model.d_min, model.d_max));
}

RunConfig config_from_json(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  reject_unknown_keys(doc, "",
                      {"planes", "channels", "image_channels", "downscale", "mode", "refinement",
                       "refine_iterations", "loss", "optimizer", "fusion", "data", "seed",
                       "checkpoint", "output"});
  RunConfig c;
  ModelConfig& m = c.model;
  if (const auto it = doc.find("planes"); it != doc.end()) {
    reject_unknown_keys(*it, "planes", {"count", "d_min", "d_max"});
    read_field(*it, "planes", "count", m.plane_count);
    read_field(*it, "planes", "d_min", m.d_min);
    read_field(*it, "planes", "d_max", m.d_max);
  }
  read_field(doc, "", "channels", m.channels);
  read_field(doc, "", "image_channels", m.image_channels);
  read_field(doc, "", "downscale", m.downscale);
  std::string mode = m.mode == FusionMode::kFused ? "fused" : "single_view";
  read_field(doc, "", "mode", mode);
  if (mode == "fused") {
    m.mode = FusionMode::kFused;
  } else if (mode == "single_view") {
    m.mode = FusionMode::kSingleView;
  } else {
    throw ConfigError("'mode': expected fused or single_view, got '" + mode + "'");
  }
  read_field(doc, "", "refinement", m.refinement);
  read_field(doc, "", "refine_iterations", m.refine.iterations);
  if (const auto it = doc.find("loss"); it != doc.end()) {
    reject_unknown_keys(*it, "loss", {"l1", "ce", "l2", "spn_l1"});
    read_field(*it, "loss", "l1", c.loss.l1);
    read_field(*it, "loss", "ce", c.loss.ce);
    read_field(*it, "loss", "l2", c.loss.l2);
    read_field(*it, "loss", "spn_l1", c.loss.spn_l1);
  }
  if (const auto it = doc.find("optimizer"); it != doc.end()) {
    reject_unknown_keys(*it, "optimizer",
                        {"learning_rate", "weight_decay", "milestones", "epochs", "bptt"});
    read_field(*it, "optimizer", "learning_rate", c.optimizer.learning_rate);
    read_field(*it, "optimizer", "weight_decay", c.optimizer.weight_decay);
    read_field(*it, "optimizer", "milestones", c.optimizer.milestones);
    read_field(*it, "optimizer", "epochs", c.epochs);
    read_field(*it, "optimizer", "bptt", c.bptt);
  }
  if (const auto it = doc.find("fusion"); it != doc.end()) {
    reject_unknown_keys(*it, "fusion", {"residual", "heads", "mask_invalid", "ray_chunk"});
    read_field(*it, "fusion", "residual", m.fusion.residual);
    read_field(*it, "fusion", "heads", m.fusion.heads);
    read_field(*it, "fusion", "mask_invalid", m.fusion.mask_invalid);
    read_field(*it, "fusion", "ray_chunk", m.fusion.ray_chunk);
  }
  if (const auto it = doc.find("data"); it != doc.end()) {
    reject_unknown_keys(*it, "data", {"sequences", "sparse_density", "eval_range"});
    std::vector<std::string> dirs;
    read_field(*it, "data", "sequences", dirs);
    c.sequences.assign(dirs.begin(), dirs.end());
    read_field(*it, "data", "sparse_density", c.sparse_density);
    if (const auto range = it->find("eval_range"); range != it->end() && !range->is_null()) {
      std::vector<double> pair;
      read_field(*it, "data", "eval_range", pair);
      if (pair.size() != 2) throw ConfigError("'data.eval_range': expected [min, max]");
      c.eval_range = std::make_pair(pair[0], pair[1]);
    }
  }
  read_field(doc, "", "seed", c.seed);
  std::string checkpoint = c.checkpoint.string(), output = c.output.string();
  read_field(doc, "", "checkpoint", checkpoint);
  read_field(doc, "", "output", output);
  c.checkpoint = checkpoint;
  c.output = output;
  c.validate();
  return c;
}

std::string config_to_json(const RunConfig& c) {
  const ModelConfig& m = c.model;
  Json doc;
  doc["planes"] = {{"count", m.plane_count}, {"d_min", m.d_min}, {"d_max", m.d_max}};
  doc["channels"] = m.channels;
  doc["image_channels"] = m.image_channels;
  doc["downscale"] = m.downscale;
  doc["mode"] = m.mode == FusionMode::kFused ? "fused" : "single_view";
  doc["refinement"] = m.refinement;
  doc["refine_iterations"] = m.refine.iterations;
  doc["loss"] = {{"l1", c.loss.l1}, {"ce", c.loss.ce}, {"l2", c.loss.l2}, {"spn_l1", c.loss.spn_l1}};
  doc["optimizer"] = {{"learning_rate", c.optimizer.learning_rate},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"milestones", c.optimizer.milestones},
                      {"epochs", c.epochs},
                      {"bptt", c.bptt}};
  doc["fusion"] = {{"residual", m.fusion.residual},
                   {"heads", m.fusion.heads},
                   {"mask_invalid", m.fusion.mask_invalid},
                   {"ray_chunk", m.fusion.ray_chunk}};
  Json data;
  std::vector<std::string> dirs;
  for (const auto& p : c.sequences) dirs.push_back(p.string());
  data["sequences"] = dirs;
  data["sparse_density"] = c.sparse_density;
  if (c.eval_range) data["eval_range"] = {c.eval_range->first, c.eval_range->second};
  doc["data"] = std::move(data);
  doc["seed"] = c.seed;
  doc["checkpoint"] = c.checkpoint.string();
  doc["output"] = c.output.string();
  return doc.dump(2);
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  Json doc;
  try {
    doc = Json::parse(text.str());
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
  // Relative sequence, checkpoint and output paths are taken relative to the
  // config file.
  const auto base = path.parent_path();
  auto resolve = [&](Json& entry) {
    if (entry.is_string() && std::filesystem::path(entry.get<std::string>()).is_relative()) {
      entry = (base / entry.get<std::string>()).lexically_normal().string();
    }
  };
  if (doc.is_object()) {
    if (doc.contains("data") && doc["data"].is_object() && doc["data"].contains("sequences") &&
        doc["data"]["sequences"].is_array()) {
      for (auto& entry : doc["data"]["sequences"]) resolve(entry);
    }
    for (const char* key : {"checkpoint", "output"}) {
      if (doc.contains(key)) resolve(doc[key]);
    }
  }
  return config_from_json(doc.dump());
}

Sequence load_sequence(const std::filesystem::path& dir, double sparse_density,
                       std::uint64_t seed) {
  if (!std::filesystem::is_directory(dir)) throw IoError("no such sequence directory " + dir.string());
  Sequence seq;
  seq.intrinsics = read_intrinsics_file(dir / "intrinsics.txt");
  const auto cameras = read_camera_file(dir / "poses.txt");
  if (cameras.empty()) throw IoError(dir.string() + ": poses.txt lists no frames");
  const std::size_t count =
      sparse_count_for_density(seq.intrinsics.width, seq.intrinsics.height, sparse_density);
  for (std::size_t f = 0; f < cameras.size(); ++f) {
    TrainingFrame frame;
    frame.image = read_ppm(dir / numbered("frame", f, "ppm"));
    frame.gt = read_depth_pfm(dir / numbered("frame", f, "pfm"));
    frame.pose = cameras[f].pose;
    if (frame.image.width != seq.intrinsics.width || frame.image.height != seq.intrinsics.height ||
        frame.gt.width != seq.intrinsics.width || frame.gt.height != seq.intrinsics.height) {
      throw DimensionError(dir.string() + ": frame " + std::to_string(f) +
                           " does not match intrinsics.txt extents");
    }
    const auto sparse_path = dir / numbered("sparse", f, "pfm");
    frame.sparse = std::filesystem::exists(sparse_path)
                       ? read_depth_pfm(sparse_path)
                       : sample_sparse(frame.gt, count, frame_seed(seed, f));
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

DepthMetrics compute_metrics(const Tensor& pred, const SparseDepthMap& gt,
                             std::pair<double, double> range) {
  if (pred.dim() != 2 || pred.size(0) != gt.height || pred.size(1) != gt.width) {
    throw DimensionError("compute_metrics: prediction " + shape_string(pred.shape()) +
                         " does not match ground truth");
  }
  auto p = pred.data();
  DepthMetrics m;
  double abs_sum = 0.0, sq_sum = 0.0, inv_abs = 0.0, inv_sq = 0.0;
  for (std::size_t i = 0; i < gt.depth.size(); ++i) {
    if (!gt.valid[i] || gt.depth[i] < range.first || gt.depth[i] > range.second) continue;
    const double e = p[i] - gt.depth[i];
    const double ie = 1.0 / std::max(p[i], kMinInversionDepth) - 1.0 / gt.depth[i];
    abs_sum += std::fabs(e);
    sq_sum += e * e;
    inv_abs += std::fabs(ie);
    inv_sq += ie * ie;
    ++m.pixels;
  }
  if (m.pixels == 0) throw EmptySupervisionError("compute_metrics: no ground truth in range");
  const double n = static_cast<double>(m.pixels);
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  m.imae = inv_abs / n;
  m.irmse = std::sqrt(inv_sq / n);
  return m;
}

std::vector<FrameOutput> infer_sequence(const ParameterStore& params, const ModelConfig& model,
                                        const Sequence& sequence) {
  NoGradGuard no_grad;
  SequenceState state;
  std::vector<FrameOutput> outputs;
  for (const TrainingFrame& frame : sequence.frames) {
    outputs.push_back(forward_frame(params, model, sequence.intrinsics,
                                    {frame.image, frame.sparse, frame.pose}, state));
  }
  return outputs;
}

std::vector<DepthMetrics> evaluate_sequence(const ParameterStore& params,
                                            const ModelConfig& model, const Sequence& sequence,
                                            std::pair<double, double> range) {
  NoGradGuard no_grad;
  SequenceState state;
  std::vector<DepthMetrics> metrics;
  for (const TrainingFrame& frame : sequence.frames) {
    const FrameOutput out = forward_frame(params, model, sequence.intrinsics,
                                          {frame.image, frame.sparse, frame.pose}, state);
    metrics.push_back(compute_metrics(out.final_depth().depth, frame.gt, range));
  }
  return metrics;
}

TrainingResult run_training(const RunConfig& config) {
  config.validate();
  if (config.sequences.empty()) throw ConfigError("'data.sequences': nothing to train on");
  std::vector<Sequence> sequences;
  for (const auto& dir : config.sequences) {
    sequences.push_back(load_sequence(dir, config.sparse_density, config.seed));
  }
  ParameterStore params = make_parameters(config.model, config.seed);
  TrainingOptions options;
  options.epochs = config.epochs;
  options.loss = config.loss;
  options.optimizer = config.optimizer;
  options.bptt = config.bptt;
  TrainingResult result = train_sequences(params, config.model, sequences, options);

  if (config.checkpoint.has_parent_path()) {
    std::filesystem::create_directories(config.checkpoint.parent_path());
  }
  save_checkpoint(config.checkpoint, params);
  std::filesystem::create_directories(config.output);
  write_loss_csv(config.output / "loss.csv", result.records);
  return result;
}

InferenceReport run_inference(const RunConfig& config) {
  config.validate();
  if (config.sequences.empty()) throw ConfigError("'data.sequences': nothing to run on");
  ParameterStore params = make_parameters(config.model);
  load_checkpoint(config.checkpoint, params);
  std::filesystem::create_directories(config.output);

  std::ofstream csv(config.output / "metrics.csv");
  if (!csv) throw IoError("cannot write " + (config.output / "metrics.csv").string());
  csv << "sequence,frame,mae,rmse,imae,irmse,pixels\n" << std::setprecision(17);

  InferenceReport report;
  for (std::size_t s = 0; s < config.sequences.size(); ++s) {
    const Sequence seq = load_sequence(config.sequences[s], config.sparse_density, config.seed);
    char name[16];
    std::snprintf(name, sizeof(name), "seq%02zu", s);
    const auto dir = config.output / name;
    std::filesystem::create_directories(dir);
    const auto outputs = infer_sequence(params, config.model, seq);
    for (std::size_t f = 0; f < outputs.size(); ++f) {
      const DepthMap& depth = outputs[f].final_depth();
      const std::size_t w = depth.width(), h = depth.height();
      const auto d = depth.depth.data();
      const auto conf = outputs[f].regressed.confidence.data();
      write_pfm(dir / numbered("depth", f, "pfm"), w, h, {d.begin(), d.end()});
      write_pfm(dir / numbered("confidence", f, "pfm"), w, h, {conf.begin(), conf.end()});
      const DepthMetrics m =
          compute_metrics(depth.depth, seq.frames[f].gt, config.evaluation_range());
      write_metrics_row(csv, std::to_string(s), std::to_string(f), m);
      report.frames.push_back(m);
    }
  }
  report.mean = mean_metrics(report.frames);
  write_metrics_row(csv, "mean", "", report.mean);
  return report;
}

std::vector<BenchmarkRow> run_benchmark(const BenchmarkOptions& options) {
  if (options.repeats == 0) throw ParameterError("benchmark: repeats must be positive");
  NoGradGuard no_grad;
  auto& tracker = attention_score_tracker();
  std::vector<BenchmarkRow> rows;
  for (std::size_t d : options.depths) {
    for (std::size_t h : options.heights) {
      for (std::size_t w : options.widths) {
        ParameterStore params;
        register_fusion(params, options.channels);
        init_glorot_uniform(params, options.seed);
        std::mt19937_64 rng(options.seed + 1);
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        auto random_volume = [&] {
          std::vector<double> v(d * options.channels * h * w);
          for (double& x : v) x = unit(rng);
          return Tensor::from_data({d, options.channels, h, w}, std::move(v));
        };
        const DepthPlaneSet planes = make_planes(std::max<std::size_t>(d, 2), 1.0, 2.0);
        const CostVolume current{planes, random_volume(), {}};
        const CostVolume previous{planes, random_volume(), {}};
        FusionConfig fusion;
        fusion.ray_chunk = options.ray_chunk;

        for (AttentionMode mode : {AttentionMode::kRay, AttentionMode::kNaive}) {
          BenchmarkRow row;
          row.mode = mode == AttentionMode::kRay ? "ray" : "naive";
          row.d = d;
          row.h = h;
          row.w = w;
          row.c = options.channels;
          row.entries = attention_entry_count(d, h, w, mode);
          row.executed = mode == AttentionMode::kRay || row.entries <= options.naive_entry_cap;
          if (row.executed) {
            std::vector<double> times;
            for (std::size_t r = 0; r < options.repeats; ++r) {
              tracker.reset();
              const auto start = std::chrono::steady_clock::now();
              const CostVolume fused = mode == AttentionMode::kRay
                                           ? fuse_volumes(current, &previous, params, fusion)
                                           : fuse_volumes_naive(current, &previous, params, fusion);
              const auto stop = std::chrono::steady_clock::now();
              times.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
            }
            row.peak_bytes = tracker.peak_bytes();
            row.total_entries = tracker.total_entries();
            row.wall_ms = median(times);
          }
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

void write_benchmark_csv(const std::filesystem::path& path, const std::vector<BenchmarkRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "mode,D,H,W,C,entries,peak_bytes,wall_ms,executed\n";
  for (const BenchmarkRow& r : rows) {
    out << r.mode << ',' << r.d << ',' << r.h << ',' << r.w << ',' << r.c << ',' << r.entries
        << ',';
    if (r.executed) {
      out << r.peak_bytes << ',' << std::fixed << std::setprecision(3) << r.wall_ms
          << std::defaultfloat;
    } else {
      out << ',';
    }
    out << ',' << (r.executed ? 1 : 0) << '\n';
  }
}

Sequence synthetic_clip(std::size_t width, std::size_t height, std::size_t frames,
                        double sparse_density, std::uint64_t seed) {
  SceneSpec spec = default_scene(seed);
  spec.trajectory.frame_count = frames;
  Sequence seq;
  seq.intrinsics = default_intrinsics(width, height);
  const std::size_t count = sparse_count_for_density(width, height, sparse_density);
  for (std::size_t f = 0; f < frames; ++f) {
    RenderedFrame r = render_frame(spec, f, seq.intrinsics);
    TrainingFrame frame;
    frame.sparse = sample_sparse(r.depth, count, frame_seed(seed, f));
    frame.image = std::move(r.image);
    frame.gt = std::move(r.depth);
    frame.pose = r.pose;
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

GradcheckReport run_gradcheck(const RunConfig& config, double step) {
  config.validate();
  Sequence seq = config.sequences.empty()
                     ? synthetic_clip(16, 16, 2, kClipDensity, config.seed)
                     : load_sequence(config.sequences.front(), config.sparse_density, config.seed);
  if (seq.frames.size() > 2) seq.frames.resize(2);
  ParameterStore params = make_parameters(config.model, config.seed);
  GradcheckReport report;
  report.parameters = params.total_elements();
  report.frames = seq.frames.size();
  report.result = gradient_check(
      [&](const ParameterStore& p) { return sequence_loss(p, config.model, seq, config.loss); },
      params, step);
  return report;
}

}  // namespace rayfusion
