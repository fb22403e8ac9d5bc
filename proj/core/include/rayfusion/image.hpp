#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "rayfusion/tensor.hpp"

namespace rayfusion {

// Planar RGB in [0, 1], stored [3 x H x W].
struct RGBImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> channels;

  static RGBImage filled(std::size_t width, std::size_t height, double value = 0.0);
  double& at(std::size_t c, std::size_t y, std::size_t x) { return channels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return channels[(c * height + y) * width + x];
  }
  void validate() const;
  Tensor to_tensor() const;  // [3 x H x W], untracked
};

// Depth in meters with a validity mask; invalid entries hold 0.
struct SparseDepthMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> depth;
  std::vector<std::uint8_t> valid;

  static SparseDepthMap empty(std::size_t width, std::size_t height);
  // Non-positive or non-finite values become invalid.
  static SparseDepthMap from_values(std::size_t width, std::size_t height,
                                    std::vector<double> values);

  std::size_t index(std::size_t y, std::size_t x) const { return y * width + x; }
  std::size_t valid_count() const;
  void set(std::size_t y, std::size_t x, double value);
  void validate() const;
  // Reduces each factor x factor block to the smallest valid depth in it
  // (the nearest surface); blocks without samples stay invalid.
  SparseDepthMap downsample_min(std::size_t factor) const;
  Tensor depth_tensor() const;  // [H x W]
  Tensor mask_tensor() const;   // [H x W] of 0/1
};

// Binary PPM (P6), 8 bits per channel.
RGBImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const RGBImage& image);

// Single-channel PFM ("Pf"). Written little-endian (scale -1.0) with rows
// bottom-to-top as the format prescribes. Non-positive values read as invalid.
std::vector<float> read_pfm(const std::filesystem::path& path, std::size_t& width,
                            std::size_t& height);
void write_pfm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<double>& values);

SparseDepthMap read_depth_pfm(const std::filesystem::path& path);
void write_depth_pfm(const std::filesystem::path& path, const SparseDepthMap& depth);

}  // namespace rayfusion
