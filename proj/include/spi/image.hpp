#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace spi {

// Scene reflectance image. Pixels are stored channel-planar:
// index = c * height * width + y * width + x. Grayscale scenes have one
// channel, RGB scenes three.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, int c = 1, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  double& at(int y, int x, int c = 0) { return pixels[c * plane_size() + static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x, int c = 0) const {
    return pixels[c * plane_size() + static_cast<std::size_t>(y) * width + x];
  }

  std::span<double> plane(int c) { return {pixels.data() + c * plane_size(), plane_size()}; }
  std::span<const double> plane(int c) const { return {pixels.data() + c * plane_size(), plane_size()}; }

  Image channel(int c) const;
  bool in_unit_range() const;
};

// Grayscale to 3 identical channels.
Image replicate_rgb(const Image& gray);
Image clamp_unit(Image img);

// 8-bit raster as read from disk. Interleaved samples, row-major.
struct Raster8 {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<std::uint8_t> samples;
};

// Binary netpbm: P5 (gray) and P6 (RGB). ASCII P2/P3 are also accepted on read.
Raster8 read_netpbm(const std::filesystem::path& path);
void write_netpbm(const std::filesystem::path& path, const Raster8& raster);

// Quantizes [0,1] values to 8 bits (round half up, clamped).
Raster8 to_raster(const Image& img);
Image from_raster(const Raster8& raster);

}  // namespace spi
