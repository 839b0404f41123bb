#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace pnmf {

/// Single-channel image with intensities in [0, 1], row-major.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
};

/// Reads PGM (P2/P5) or PNG. Colour inputs are reduced with luma weights
/// 0.299/0.587/0.114; intensities are divided by the format's max value.
GrayImage read_image(const std::filesystem::path& path);

GrayImage rgb_to_gray(std::size_t width, std::size_t height, const std::vector<float>& rgb);

/// Bilinear resampling with half-pixel centres and edge clamping.
GrayImage resize_bilinear(const GrayImage& src, std::size_t out_width, std::size_t out_height);

/// Writes binary 8-bit PGM (P5); values are clamped to [0, 1].
void write_pgm(const GrayImage& img, const std::filesystem::path& path);

}  // namespace pnmf
