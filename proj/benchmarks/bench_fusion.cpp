#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rayfusion/geometry.hpp"
#include "rayfusion/ray_fusion.hpp"

using namespace rayfusion;

namespace {

constexpr std::size_t kChannels = 8;

Tensor random_volume(std::size_t d, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(d * kChannels * h * w);
  for (double& x : v) x = dist(rng);
  return Tensor::from_data({d, kChannels, h, w}, std::move(v));
}

class FusionFixture : public benchmark::Fixture {
 public:
  void SetUp(const benchmark::State& state) override {
    const auto d = static_cast<std::size_t>(state.range(0));
    side = static_cast<std::size_t>(state.range(1));
    const DepthPlaneSet planes = make_planes(d, 1.0, 5.0);
    current = {planes, random_volume(d, side, side, 1), {}};
    previous = {planes, random_volume(d, side, side, 2), {}};
    params = ParameterStore{};
    register_fusion(params, kChannels);
    init_glorot_uniform(params, 3);
  }

  void report(benchmark::State& state) {
    const auto& tracker = attention_score_tracker();
    state.counters["peak_bytes"] = static_cast<double>(tracker.peak_bytes());
    state.counters["score_entries"] = static_cast<double>(tracker.total_entries());
  }

  std::size_t side = 0;
  CostVolume current, previous;
  ParameterStore params;
};

BENCHMARK_DEFINE_F(FusionFixture, Ray)(benchmark::State& state) {
  NoGradGuard no_grad;
  for (auto _ : state) {
    attention_score_tracker().reset();
    benchmark::DoNotOptimize(fuse_volumes(current, &previous, params));
  }
  report(state);
}

BENCHMARK_DEFINE_F(FusionFixture, Naive)(benchmark::State& state) {
  NoGradGuard no_grad;
  for (auto _ : state) {
    attention_score_tracker().reset();
    benchmark::DoNotOptimize(fuse_volumes_naive(current, &previous, params));
  }
  report(state);
}

BENCHMARK_REGISTER_F(FusionFixture, Ray)
    ->ArgsProduct({{8, 16}, {4, 8, 16}})
    ->Unit(benchmark::kMillisecond);
BENCHMARK_REGISTER_F(FusionFixture, Naive)
    ->ArgsProduct({{8, 16}, {4, 8}})
    ->Unit(benchmark::kMillisecond);

void BM_AlignVolume(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  const std::size_t side = 16;
  CameraIntrinsics k;
  k.fx = k.fy = 12.0;
  k.cx = k.cy = side / 2.0;
  k.width = k.height = side;
  const DepthPlaneSet planes = make_planes(d, 1.0, 5.0);
  const Tensor features = random_volume(d, side, side, 4);
  Pose pose = Pose::identity();
  pose.translation = {0.05, 0.0, 0.02};
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(align_volume(features, pose, k, planes));
}
BENCHMARK(BM_AlignVolume)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
