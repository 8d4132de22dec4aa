#include "partcraft/archive.hpp"
#include "partcraft/error.hpp"
#include "partcraft/image.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>

using namespace partcraft;

namespace {

Image gradient_image(int w, int h) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y, 0) = static_cast<float>(x) / (w - 1);
      img.at(x, y, 1) = static_cast<float>(y) / (h - 1);
      img.at(x, y, 2) = 0.5f;
    }
  return img;
}

}  // namespace

TEST(Png, EncodeDecodeKeepsEightBitValues) {
  const Image img = gradient_image(17, 9);
  const Image back = decode_image(encode_png(img));
  ASSERT_EQ(back.width, 17);
  ASSERT_EQ(back.height, 9);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) EXPECT_NEAR(back.rgb[i], img.rgb[i], 0.5 / 255.0 + 1e-6);
  EXPECT_EQ(decode_image(encode_png(back)), back);
}

TEST(Png, GarbageIsRejected) {
  EXPECT_THROW(decode_image({1, 2, 3, 4, 5}), InputError);
  EXPECT_THROW(decode_image({}), InputError);
}

TEST(Png, ListImagesFindsPngFilesSorted) {
  oracle::TempDir dir;
  write_png(gradient_image(4, 4), dir.path / "b.png");
  write_png(gradient_image(4, 4), dir.path / "a.png");
  std::ofstream(dir.path / "notes.txt") << "x";
  const auto files = list_images(dir.path);
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(files[0].filename(), "a.png");
  EXPECT_EQ(files[1].filename(), "b.png");
}

TEST(Resize, NearestAndFlipAreExactOnIntegerScales) {
  const Image img = gradient_image(4, 4);
  const Image up = resize_nearest(img, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) EXPECT_EQ(up.at(x, y, 0), img.at(x / 2, y / 2, 0));
  const Image flipped = flip_horizontal(img);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_EQ(flipped.at(x, y, 0), img.at(3 - x, y, 0));
  EXPECT_EQ(flip_horizontal(flipped), img);
}

TEST(Resize, BilinearKeepsTheMeanOfALinearRamp) {
  const Image img = gradient_image(32, 32);
  const Image down = resize(img, 8, 8);
  double a = 0.0, b = 0.0;
  for (float v : img.rgb) a += v;
  for (float v : down.rgb) b += v;
  EXPECT_NEAR(a / img.rgb.size(), b / down.rgb.size(), 1e-4);
}

TEST(Crop, CopiesTheRequestedWindow) {
  const Image img = gradient_image(8, 8);
  const Image c = crop(img, 2, 3, 4, 2);
  ASSERT_EQ(c.width, 4);
  ASSERT_EQ(c.height, 2);
  EXPECT_EQ(c.at(0, 0, 0), img.at(2, 3, 0));
  EXPECT_EQ(c.at(3, 1, 1), img.at(5, 4, 1));
}

TEST(Archive, RoundTripIsBitExact) {
  Archive a;
  a.meta = {{"schema", "x"}, {"n", 3}};
  Rng rng(5);
  a.tensors["w"] = randn(3, 4, rng);
  a.tensors["b"] = Matrix::Zero(1, 4);
  a.tensors["w"](1, 2) = -0.0;
  const Archive b = decode_archive(encode_archive(a));
  EXPECT_EQ(b.meta, a.meta);
  ASSERT_EQ(b.tensors.size(), 2u);
  for (const auto& [name, m] : a.tensors) {
    const Matrix& n = b.tensor(name);
    ASSERT_EQ(n.rows(), m.rows());
    ASSERT_EQ(n.cols(), m.cols());
    EXPECT_EQ(std::memcmp(n.data(), m.data(), sizeof(double) * m.size()), 0);
  }
  EXPECT_THROW(b.tensor("missing"), InputError);
}

TEST(Archive, TruncatedOrForeignBytesAreRejected) {
  Archive a;
  a.tensors["w"] = Matrix::Ones(2, 2);
  auto bytes = encode_archive(a);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_archive(bytes), InputError);
  EXPECT_THROW(decode_archive({'n', 'o', 'p', 'e'}), InputError);
}
