#include "rayfusion/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "rayfusion/errors.hpp"

namespace rayfusion {

Tensor& ParameterStore::add(const std::string& path, Shape shape) {
  return add(path, Tensor::zeros(std::move(shape), true));
}

Tensor& ParameterStore::add(const std::string& path, Tensor value) {
  if (path.empty()) throw ParameterError("parameter path must be non-empty");
  if (params_.contains(path)) throw ParameterError("duplicate parameter path '" + path + "'");
  if (!value.requires_grad()) value = Tensor::from_data(value.shape(),
                                                        std::vector<double>(value.data().begin(),
                                                                            value.data().end()),
                                                        true);
  return params_.emplace(path, std::move(value)).first->second;
}

bool ParameterStore::contains(const std::string& path) const { return params_.contains(path); }

const Tensor& ParameterStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw ParameterError("unknown parameter '" + path + "'");
  return it->second;
}

Tensor& ParameterStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw ParameterError("unknown parameter '" + path + "'");
  return it->second;
}

std::size_t ParameterStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

ParameterStore ParameterStore::clone() const {
  ParameterStore copy;
  for (const auto& [name, t] : params_) {
    copy.params_.emplace(name, Tensor::from_data(t.shape(),
                                                 std::vector<double>(t.data().begin(),
                                                                     t.data().end()),
                                                 true));
  }
  return copy;
}

std::pair<double, double> fan_in_out(const Shape& shape) {
  if (shape.size() < 2) {
    const double n = shape.empty() ? 1.0 : static_cast<double>(shape[0]);
    return {n, n};
  }
  double receptive = 1.0;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
  const double rows = static_cast<double>(shape[0]) * receptive;
  const double cols = static_cast<double>(shape[1]) * receptive;
  if (shape.size() == 2) return {rows, cols};  // matrices act as x . W
  return {cols, rows};                         // kernels are [out x in x k..]
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void init_glorot_uniform(ParameterStore& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : params) {
    auto values = t.mutable_data();
    if (ends_with(name, "bias")) {
      std::fill(values.begin(), values.end(), 0.0);
      continue;
    }
    const auto [fan_in, fan_out] = fan_in_out(t.shape());
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& v : values) v = dist(rng);
  }
}

GradientCheckResult gradient_check(const std::function<Tensor(const ParameterStore&)>& loss,
                                   ParameterStore& params, double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw ParameterError("gradient_check: step must lie in [1e-7, 1e-3]");
  }
  params.zero_grad();
  Tensor base = loss(params);
  if (!std::isfinite(base.item())) throw NumericError("gradient_check: non-finite loss at base point");
  base.backward();

  GradientCheckResult result;
  NoGradGuard no_grad;
  for (auto& [name, t] : params) {
    auto values = t.mutable_data();
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double plus = loss(params).item();
      values[i] = original - step;
      const double minus = loss(params).item();
      values[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("gradient_check: non-finite loss probing '" + name + "'[" +
                           std::to_string(i) + "]");
      }
      const double numeric = (plus - minus) / (2.0 * step);
      const double err = std::fabs(analytic[i] - numeric) /
                         std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
      ++result.entries_checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        result.max_relative_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace rayfusion
