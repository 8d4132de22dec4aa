#include "partcraft/image.hpp"

#include "partcraft/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace partcraft {

namespace {

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw InputError(std::string("undecodable png: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw InputError("undecodable png: " + msg);
  }
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  for (std::size_t i = 0; i < buffer.size(); ++i) out.rgb[i] = buffer[i] / 255.0f;
  return out;
}

Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::string text(bytes.begin(), bytes.end());
  std::istringstream in(text);
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
    int v = -1;
    in >> v;
    return v;
  };
  int w = next_int();
  int h = next_int();
  int maxval = next_int();
  if (magic != "P6" || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw InputError("undecodable ppm header");
  }
  in.get();
  auto offset = static_cast<std::size_t>(in.tellg());
  std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (offset + need > bytes.size()) throw InputError("truncated ppm payload");
  Image out(w, h);
  for (std::size_t i = 0; i < need; ++i) out.rgb[i] = bytes[offset + i] / static_cast<float>(maxval);
  return out;
}

}  // namespace

Image decode_image(const std::vector<std::uint8_t>& bytes) {
  static const std::uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  throw InputError("unrecognized image format");
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_image(bytes);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.empty()) throw InputError("cannot encode an empty image");
  std::vector<std::uint8_t> pixels(image.rgb.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    float v = std::clamp(image.rgb[i], 0.0f, 1.0f);
    pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw InternalError(std::string("png sizing failed: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw InternalError(std::string("png encoding failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image resize(const Image& image, int width, int height) {
  if (image.width == width && image.height == height) return image;
  if (image.empty() || width <= 0 || height <= 0) throw InputError("invalid resize geometry");
  Image out(width, height);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, image.height - 1);
    double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, image.width - 1);
      double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        double top = image.at(x0, y0, c) * (1 - wx) + image.at(x1, y0, c) * wx;
        double bot = image.at(x0, y1, c) * (1 - wx) + image.at(x1, y1, c) * wx;
        out.at(x, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image resize_nearest(const Image& image, int width, int height) {
  if (image.empty() || width <= 0 || height <= 0) throw InputError("invalid resize geometry");
  Image out(width, height);
  for (int y = 0; y < height; ++y) {
    int sy = std::min(image.height - 1, static_cast<int>(static_cast<long>(y) * image.height / height));
    for (int x = 0; x < width; ++x) {
      int sx = std::min(image.width - 1, static_cast<int>(static_cast<long>(x) * image.width / width));
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(image.width - 1 - x, y, c);
  return out;
}

Image crop(const Image& image, int x0, int y0, int width, int height) {
  if (x0 < 0 || y0 < 0 || width <= 0 || height <= 0 || x0 + width > image.width || y0 + height > image.height) {
    throw InputError("crop rectangle outside image");
  }
  Image out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(x0 + x, y0 + y, c);
  return out;
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".ppm") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace partcraft
