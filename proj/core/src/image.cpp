#include "rayfusion/image.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "rayfusion/errors.hpp"

namespace rayfusion {

RGBImage RGBImage::filled(std::size_t width, std::size_t height, double value) {
  return {width, height, std::vector<double>(3 * width * height, value)};
}

void RGBImage::validate() const {
  if (channels.size() != 3 * width * height) {
    throw DimensionError("rgb image: channel buffer does not match " + std::to_string(width) +
                         "x" + std::to_string(height));
  }
  for (double v : channels) {
    if (!(v >= 0.0 && v <= 1.0)) throw ParameterError("rgb image: values must lie in [0, 1]");
  }
}

Tensor RGBImage::to_tensor() const { return Tensor::from_data({3, height, width}, channels); }

SparseDepthMap SparseDepthMap::empty(std::size_t width, std::size_t height) {
  return {width, height, std::vector<double>(width * height, 0.0),
          std::vector<std::uint8_t>(width * height, 0)};
}

SparseDepthMap SparseDepthMap::from_values(std::size_t width, std::size_t height,
                                           std::vector<double> values) {
  if (values.size() != width * height) {
    throw DimensionError("depth map: value count does not match extents");
  }
  SparseDepthMap map = empty(width, height);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] > 0.0 && std::isfinite(values[i])) {
      map.depth[i] = values[i];
      map.valid[i] = 1;
    }
  }
  return map;
}

std::size_t SparseDepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void SparseDepthMap::set(std::size_t y, std::size_t x, double value) {
  const std::size_t i = index(y, x);
  if (value > 0.0 && std::isfinite(value)) {
    depth[i] = value;
    valid[i] = 1;
  } else {
    depth[i] = 0.0;
    valid[i] = 0;
  }
}

void SparseDepthMap::validate() const {
  if (depth.size() != width * height || valid.size() != width * height) {
    throw DimensionError("depth map: buffers do not match extents");
  }
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (valid[i] ? !(depth[i] > 0.0 && std::isfinite(depth[i])) : depth[i] != 0.0) {
      throw ParameterError("depth map: valid entries must be positive, invalid entries zero");
    }
  }
}

SparseDepthMap SparseDepthMap::downsample_min(std::size_t factor) const {
  if (factor == 0 || width % factor || height % factor) {
    throw DimensionError("depth map: " + std::to_string(width) + "x" + std::to_string(height) +
                         " not divisible by " + std::to_string(factor));
  }
  SparseDepthMap out = empty(width / factor, height / factor);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t i = index(y, x);
      if (!valid[i]) continue;
      const std::size_t j = out.index(y / factor, x / factor);
      if (!out.valid[j] || depth[i] < out.depth[j]) {
        out.depth[j] = depth[i];
        out.valid[j] = 1;
      }
    }
  }
  return out;
}

Tensor SparseDepthMap::depth_tensor() const { return Tensor::from_data({height, width}, depth); }

Tensor SparseDepthMap::mask_tensor() const {
  return Tensor::from_data({height, width}, std::vector<double>(valid.begin(), valid.end()));
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string token;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

std::size_t parse_extent(const std::string& token, const std::filesystem::path& path) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(token, &pos);
    if (pos != token.size() || v <= 0) throw std::invalid_argument(token);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed header extent '" + token + "'");
  }
}

}  // namespace

RGBImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (header_token(in) != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  const std::size_t width = parse_extent(header_token(in), path);
  const std::size_t height = parse_extent(header_token(in), path);
  if (header_token(in) != "255") throw IoError(path.string() + ": only maxval 255 is supported");
  std::vector<unsigned char> bytes(3 * width * height);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  RGBImage image = RGBImage::filled(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        image.at(c, y, x) = bytes[(y * width + x) * 3 + c] / 255.0;
      }
    }
  }
  return image;
}

void write_ppm(const std::filesystem::path& path, const RGBImage& image) {
  image.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(3 * image.width * image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        bytes[(y * image.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(image.at(c, y, x) * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_pfm(const std::filesystem::path& path, std::size_t& width,
                            std::size_t& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != "Pf") throw IoError(path.string() + ": not a single-channel PFM (Pf)");
  std::string dims;
  std::getline(in, dims);
  std::istringstream dim_stream(dims);
  long w = 0, h = 0;
  if (!(dim_stream >> w >> h) || w <= 0 || h <= 0) throw IoError(path.string() + ": bad extents");
  std::string scale_line;
  std::getline(in, scale_line);
  double scale = 0.0;
  try {
    scale = std::stod(scale_line);
  } catch (const std::exception&) {
    throw IoError(path.string() + ": bad scale line");
  }
  if (scale == 0.0) throw IoError(path.string() + ": zero scale");
  const bool little = scale < 0.0;
  width = static_cast<std::size_t>(w);
  height = static_cast<std::size_t>(h);
  std::vector<std::uint32_t> raw(width * height);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  const bool host_little = std::endian::native == std::endian::little;
  std::vector<float> values(width * height);
  for (std::size_t row = 0; row < height; ++row) {
    const std::size_t y = height - 1 - row;  // stored bottom-to-top
    for (std::size_t x = 0; x < width; ++x) {
      std::uint32_t bits = raw[row * width + x];
      if (little != host_little) bits = __builtin_bswap32(bits);
      float f;
      std::memcpy(&f, &bits, 4);
      values[y * width + x] = f;
    }
  }
  return values;
}

void write_pfm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<double>& values) {
  if (values.size() != width * height) throw DimensionError("write_pfm: extent mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "Pf\n" << width << ' ' << height << "\n-1.0\n";
  const bool host_little = std::endian::native == std::endian::little;
  std::vector<std::uint32_t> raw(width * height);
  for (std::size_t row = 0; row < height; ++row) {
    const std::size_t y = height - 1 - row;
    for (std::size_t x = 0; x < width; ++x) {
      const float f = static_cast<float>(values[y * width + x]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      if (!host_little) bits = __builtin_bswap32(bits);
      raw[row * width + x] = bits;
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
}

SparseDepthMap read_depth_pfm(const std::filesystem::path& path) {
  std::size_t width = 0, height = 0;
  const auto values = read_pfm(path, width, height);
  return SparseDepthMap::from_values(width, height,
                                     std::vector<double>(values.begin(), values.end()));
}

void write_depth_pfm(const std::filesystem::path& path, const SparseDepthMap& depth) {
  write_pfm(path, depth.width, depth.height, depth.depth);
}

}  // namespace rayfusion
