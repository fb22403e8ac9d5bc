#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rayfusion/tensor.hpp"

namespace rayfusion {

// Named trainable tensors. std::map keeps iteration lexicographic by path.
class ParameterStore {
 public:
  using Map = std::map<std::string, Tensor>;

  // Registers a zero-initialized tracked parameter; duplicate paths throw.
  Tensor& add(const std::string& path, Shape shape);
  Tensor& add(const std::string& path, Tensor value);

  bool contains(const std::string& path) const;
  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  std::vector<std::string> names() const;

  void zero_grad();
  // Deep copy with fresh leaves.
  ParameterStore clone() const;

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)); parameters whose
// path ends in "bias" are zeroed. Draws walk the store in path order.
void init_glorot_uniform(ParameterStore& params, std::uint64_t seed);

// Conv kernels use receptive-field-scaled channel counts. The Glorot bound
// only depends on the sum, so transposed kernels need no special case.
std::pair<double, double> fan_in_out(const Shape& shape);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

// Compares reverse-mode gradients of `loss` with central differences
// (f(p+h) - f(p-h)) / 2h for every parameter entry. Relative error is
// |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
GradientCheckResult gradient_check(const std::function<Tensor(const ParameterStore&)>& loss,
                                   ParameterStore& params, double step = 1e-5);

}  // namespace rayfusion
