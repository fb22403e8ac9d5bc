#include "rayfusion/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "rayfusion/errors.hpp"
#include "rayfusion/ops.hpp"

namespace rayfusion {

namespace {

constexpr double kLogEpsilon = 1e-12;
constexpr char kMagic[4] = {'R', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::size_t checked_valid_count(const SparseDepthMap& gt) {
  const std::size_t n = gt.valid_count();
  if (n == 0) throw EmptySupervisionError("loss: ground truth has no valid pixels");
  return n;
}

void check_extent(const Tensor& pred, const SparseDepthMap& gt, const char* what) {
  if (pred.dim() != 2 || pred.size(0) != gt.height || pred.size(1) != gt.width) {
    throw DimensionError(std::string(what) + ": prediction " + shape_string(pred.shape()) +
                         " does not match ground truth " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
  }
}

Tensor masked_error(const Tensor& pred, const SparseDepthMap& gt) {
  return ops::mul(ops::sub(pred, gt.depth_tensor()), gt.mask_tensor());
}

template <typename T>
void write_raw(std::ostream& out, T value) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
  } else {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T read_raw(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw LoadError(path.string() + ": truncated checkpoint");
  }
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void LossConfig::validate() const {
  if (!l1 && !l2 && !ce) throw ParameterError("loss: at least one term must be enabled");
}

std::vector<double> soft_label(double depth, const DepthPlaneSet& planes, bool* clamped) {
  std::vector<double> label(planes.count, 0.0);
  if (clamped) *clamped = false;
  if (depth <= planes.d_min || depth >= planes.d_max) {
    if (clamped) *clamped = depth < planes.d_min || depth > planes.d_max;
    label[depth <= planes.d_min ? 0 : planes.count - 1] = 1.0;
    return label;
  }
  const auto upper = std::upper_bound(planes.depths.begin(), planes.depths.end(), depth);
  const std::size_t hi = static_cast<std::size_t>(upper - planes.depths.begin());
  const std::size_t lo = hi - 1;
  const double gap = planes.depths[hi] - planes.depths[lo];
  label[lo] = (planes.depths[hi] - depth) / gap;
  label[hi] = (depth - planes.depths[lo]) / gap;
  return label;
}

Tensor l1_loss(const Tensor& pred, const SparseDepthMap& gt) {
  check_extent(pred, gt, "l1_loss");
  const double n = static_cast<double>(checked_valid_count(gt));
  return ops::mul_scalar(ops::sum(ops::abs(masked_error(pred, gt))), 1.0 / n);
}

Tensor l2_loss(const Tensor& pred, const SparseDepthMap& gt) {
  check_extent(pred, gt, "l2_loss");
  const double n = static_cast<double>(checked_valid_count(gt));
  return ops::mul_scalar(ops::sum(ops::square(masked_error(pred, gt))), 1.0 / n);
}

Tensor ce_loss(const ProbabilityVolume& probabilities, const SparseDepthMap& gt) {
  const Tensor& p = probabilities.probs;
  const DepthPlaneSet& planes = probabilities.planes;
  if (p.dim() != 3 || p.size(0) != planes.count || p.size(1) != gt.height ||
      p.size(2) != gt.width) {
    throw DimensionError("ce_loss: probabilities " + shape_string(p.shape()) +
                         " do not match ground truth " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
  }
  const std::size_t n = checked_valid_count(gt);
  const std::size_t plane_size = gt.width * gt.height;
  // Soft labels pre-scaled by -1/|P|, zero at unsupervised pixels.
  std::vector<double> target(planes.count * plane_size, 0.0);
  for (std::size_t q = 0; q < plane_size; ++q) {
    if (!gt.valid[q]) continue;
    const auto label = soft_label(gt.depth[q], planes);
    for (std::size_t i = 0; i < planes.count; ++i) {
      target[i * plane_size + q] = -label[i] / static_cast<double>(n);
    }
  }
  const Tensor log_p = ops::log(ops::add_scalar(p, kLogEpsilon));
  return ops::sum(ops::mul(log_p, Tensor::from_data(p.shape(), std::move(target))));
}

LossTerms frame_loss(const LossConfig& config, const FrameOutput& output,
                     const SparseDepthMap& gt) {
  config.validate();
  LossTerms terms;
  const Tensor& depth = config.spn_l1 ? output.refined.depth : output.regressed.depth;
  if (config.l1) terms.l1 = l1_loss(depth, gt);
  if (config.l2) terms.l2 = l2_loss(depth, gt);
  if (config.ce) terms.ce = ce_loss(output.probabilities, gt);
  for (const Tensor* t : {&terms.l1, &terms.l2, &terms.ce}) {
    if (!t->defined()) continue;
    terms.total = terms.total.defined() ? ops::add(terms.total, *t) : *t;
  }
  return terms;
}

OptimizerState OptimizerState::initial(const OptimizerConfig& config) {
  OptimizerState state;
  state.learning_rate = config.learning_rate;
  return state;
}

void optimizer_step(ParameterStore& params, OptimizerState& state,
                    const OptimizerConfig& config) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw TrainingError("optimizer: parameter '" + name + "' has no gradient");
  }
  const std::size_t step = state.step_count + 1;
  const double lr = state.learning_rate;
  const double decay = 1.0 - lr * config.weight_decay;
  const double correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (auto& [name, t] : params) {
    auto values = t.mutable_data();
    auto grad = t.grad();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    m.resize(values.size(), 0.0);
    v.resize(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] *= decay;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
  state.step_count = step;
  if (std::count(config.milestones.begin(), config.milestones.end(), step)) {
    state.learning_rate *= 0.5;
  }
}

TrainingResult train_sequences(ParameterStore& params, const ModelConfig& model,
                               const std::vector<Sequence>& sequences,
                               const TrainingOptions& options) {
  options.loss.validate();
  model.validate();
  TrainingResult result;
  OptimizerState state = OptimizerState::initial(options.optimizer);
  const std::size_t window = options.bptt ? 2 : 1;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    double epoch_total = 0.0;
    std::size_t epoch_frames = 0;
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      const Sequence& seq = sequences[s];
      SequenceState carried;
      Tensor pending;
      params.zero_grad();
      for (std::size_t f = 0; f < seq.frames.size(); ++f) {
        const TrainingFrame& frame = seq.frames[f];
        const bool closes_window = (f + 1) % window == 0 || f + 1 == seq.frames.size();
        const FrameOutput out = forward_frame(params, model, seq.intrinsics,
                                              {frame.image, frame.sparse, frame.pose}, carried,
                                              !closes_window);
        const LossTerms terms = frame_loss(options.loss, out, frame.gt);
        const double total = terms.total.item();
        if (!std::isfinite(total)) {
          throw NumericError("training: non-finite loss at sequence " + std::to_string(s) +
                             ", frame " + std::to_string(f));
        }
        pending = pending.defined() ? ops::add(pending, terms.total) : terms.total;
        LossRecord record{epoch, s, f, terms.l1.defined() ? terms.l1.item() : 0.0,
                          terms.ce.defined() ? terms.ce.item() : 0.0, total};
        epoch_total += total;
        ++epoch_frames;
        result.records.push_back(record);
        if (!closes_window) continue;
        pending.backward();
        pending = Tensor();
        optimizer_step(params, state, options.optimizer);
        params.zero_grad();
        ++result.steps;
        if (options.on_step && !options.on_step(record)) {
          result.epoch_loss.push_back(epoch_total / static_cast<double>(epoch_frames));
          return result;
        }
      }
    }
    result.epoch_loss.push_back(epoch_frames ? epoch_total / static_cast<double>(epoch_frames)
                                             : 0.0);
  }
  return result;
}

Tensor sequence_loss(const ParameterStore& params, const ModelConfig& model,
                     const Sequence& sequence, const LossConfig& loss) {
  if (sequence.frames.empty()) throw ParameterError("sequence_loss: empty sequence");
  SequenceState carried;
  Tensor total;
  for (const TrainingFrame& frame : sequence.frames) {
    const FrameOutput out = forward_frame(params, model, sequence.intrinsics,
                                          {frame.image, frame.sparse, frame.pose}, carried, true);
    const Tensor t = frame_loss(loss, out, frame.gt).total;
    total = total.defined() ? ops::add(total, t) : t;
  }
  return total;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,frame,l1,ce,total\n" << std::setprecision(17);
  for (const LossRecord& r : records) {
    out << r.epoch << ',' << r.frame << ',' << r.l1 << ',' << r.ce << ',' << r.total << '\n';
  }
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_raw<std::uint32_t>(out, kVersion);
  write_raw<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t extent : t.shape()) write_raw<std::uint64_t>(out, extent);
    for (double v : t.data()) write_raw<double>(out, v);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ParameterStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw LoadError(path.string() + ": not a checkpoint");
  }
  const auto version = read_raw<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = read_raw<std::uint64_t>(in, path);
  std::map<std::string, std::pair<Shape, std::vector<double>>> stored;
  for (std::uint64_t p = 0; p < count; ++p) {
    const auto length = read_raw<std::uint32_t>(in, path);
    std::string name(length, '\0');
    if (!in.read(name.data(), length)) throw LoadError(path.string() + ": truncated checkpoint");
    const auto rank = read_raw<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& e : shape) e = read_raw<std::uint64_t>(in, path);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = read_raw<double>(in, path);
    stored.emplace(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }

  std::vector<std::string> missing, unexpected, mismatched;
  for (const auto& [name, t] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) {
      missing.push_back(name);
    } else if (it->second.first != t.shape()) {
      mismatched.push_back(name + " " + shape_string(it->second.first) + " vs " +
                           shape_string(t.shape()));
    }
  }
  for (const auto& [name, _] : stored) {
    if (!params.contains(name)) unexpected.push_back(name);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    std::ostringstream msg;
    msg << path.string() << ": checkpoint does not match the configured model";
    auto list = [&msg](const char* label, const std::vector<std::string>& names) {
      if (names.empty()) return;
      msg << "; " << label << ':';
      for (const auto& n : names) msg << ' ' << n;
    };
    list("missing", missing);
    list("unexpected", unexpected);
    list("shape mismatch", mismatched);
    throw LoadError(msg.str());
  }
  for (auto& [name, t] : params) {
    auto& values = stored.at(name).second;
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

}  // namespace rayfusion
