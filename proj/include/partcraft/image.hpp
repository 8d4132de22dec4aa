#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace partcraft {

/// Interleaved RGB raster with channel values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const { return width == 0 || height == 0; }
  float& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

/// Decodes PNG or binary PPM (P6). Throws InputError on undecodable data.
Image decode_image(const std::vector<std::uint8_t>& bytes);
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const Image& image, const std::filesystem::path& path);

/// Bilinear resampling (pixel-center aligned).
Image resize(const Image& image, int width, int height);
Image resize_nearest(const Image& image, int width, int height);
Image flip_horizontal(const Image& image);
Image crop(const Image& image, int x0, int y0, int width, int height);

/// Image files (png/ppm) in a directory, sorted by filename.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace partcraft
