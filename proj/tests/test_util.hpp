#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "rayfusion/parameters.hpp"
#include "rayfusion/tensor.hpp"

namespace rftest {

inline rayfusion::Tensor random_tensor(rayfusion::Shape shape, std::mt19937_64& rng,
                                       bool requires_grad = false, double lo = -1.0,
                                       double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(rayfusion::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return rayfusion::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> values(const rayfusion::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

// Fills every parameter with uniform draws (biases included).
inline void randomize(rayfusion::ParameterStore& params, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& [_, t] : params) {
    for (double& x : t.mutable_data()) x = dist(rng);
  }
}

}  // namespace rftest
