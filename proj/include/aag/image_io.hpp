#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace aag {

// 8-bit image, interleaved rows (HWC), 1 or 3 channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

// Decodes JPEG, PNG, or binary PGM/PPM by content, not extension. Grayscale
// stays 1-channel, everything else becomes RGB. Throws FormatError.
Image read_image(const std::string& path);

void write_pgm(const std::string& path, const Image& img);  // 1 channel, P5
void write_ppm(const std::string& path, const Image& img);  // 3 channels, P6
void write_png(const std::string& path, const Image& img);
void write_jpeg(const std::string& path, const Image& img, int quality = 95);

// Float image in [0,1], planar CHW.
struct FloatImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
};

FloatImage to_float_rgb(const Image& img);
// Bilinear resize with half-pixel centres and edge clamping.
FloatImage resize_bilinear(const FloatImage& img, std::size_t height, std::size_t width);
void flip_horizontal(FloatImage& img);

}  // namespace aag
