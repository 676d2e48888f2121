#pragma once

// Generates a UTK-style directory ("age_gender_race_id.ext") of images with
// learnable structure: gender tints the background, age sets the radius of
// a bright disc. Noise and jitter keep it from being trivially separable.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "aag/image_io.hpp"

namespace synthetic {

struct Options {
  std::size_t count = 64;
  std::size_t size = 64;
  std::uint64_t seed = 1;
  int max_age = 100;
  bool mixed_formats = true;  // cycle PNG / PPM / JPEG
};

inline aag::Image render(int age, int gender, std::size_t size, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.04);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  const double strength = 0.12 + 0.08 * jitter(rng);
  const double base = 0.45 + 0.08 * jitter(rng);
  const double tint[3] = {gender ? base + strength : base - strength, base,
                          gender ? base - strength : base + strength};
  const double s = static_cast<double>(size);
  const double radius = s * (0.08 + 0.34 * std::min(age, 110) / 110.0);
  const double cx = s / 2 + 0.06 * s * jitter(rng), cy = s / 2 + 0.06 * s * jitter(rng);
  aag::Image img{size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double d = std::hypot(static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy);
      const bool inside = d < radius;
      for (std::size_t c = 0; c < 3; ++c) {
        double v = (inside ? 0.9 : tint[c]) + noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        img.pixels[(y * size + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

// Writes the images and returns their filenames.
inline std::vector<std::string> write_dataset(const std::string& dir, const Options& opt) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<int> age_dist(1, opt.max_age);
  std::uniform_int_distribution<int> gender_dist(0, 1);
  std::uniform_int_distribution<int> race_dist(0, 4);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < opt.count; ++i) {
    const int age = age_dist(rng), gender = gender_dist(rng);
    const auto img = render(age, gender, opt.size, rng);
    const std::string stem = std::to_string(age) + "_" + std::to_string(gender) + "_" +
                             std::to_string(race_dist(rng)) + "_" + std::to_string(1000000 + i);
    const int format = opt.mixed_formats ? static_cast<int>(i % 3) : 0;
    std::string name;
    if (format == 0) {
      name = stem + ".png";
      aag::write_png(dir + "/" + name, img);
    } else if (format == 1) {
      name = stem + ".ppm";
      aag::write_ppm(dir + "/" + name, img);
    } else {
      name = stem + ".jpg.chip.jpg";
      aag::write_jpeg(dir + "/" + name, img, 95);
    }
    names.push_back(name);
  }
  return names;
}

inline std::string temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("aag_" + tag + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace synthetic
