#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace slidevec {

/// 8-bit interleaved RGB raster, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t* at(int x, int y) noexcept {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  const std::uint8_t* at(int x, int y) const noexcept {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) noexcept {
    std::uint8_t* p = at(x, y);
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }
  bool valid() const noexcept {
    return width > 0 && height > 0 &&
           pixels.size() == static_cast<std::size_t>(width) * height * 3;
  }
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

RgbImage crop(const RgbImage& src, int x, int y, int w, int h);

// Loads by extension: .png or .ppm (binary P6, maxval 255).
RgbImage load_raster(const std::filesystem::path& path);
RgbImage load_png(const std::filesystem::path& path);
RgbImage load_ppm(const std::filesystem::path& path);

void save_png(const std::filesystem::path& path, const RgbImage& image);
void save_png(const std::filesystem::path& path, const GrayImage& image);
void save_ppm(const std::filesystem::path& path, const RgbImage& image);

}  // namespace slidevec
