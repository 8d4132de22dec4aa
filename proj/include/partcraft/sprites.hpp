#pragma once

#include "partcraft/image.hpp"
#include "partcraft/tensor.hpp"

#include <array>
#include <vector>

/// Procedural sprite corpus with exact ground-truth part layout.
///
/// Each sprite is a 3-part creature (head, body, tail) over a flat
/// background. Parts differ by luminance texture, variants by color.
namespace partcraft::sprites {

inline constexpr int kParts = 3;
inline constexpr int kVariants = 4;
inline constexpr int kGridSide = 8;
inline constexpr int kPatchSize = 4;
inline constexpr int kImageSide = kGridSide * kPatchSize;
inline constexpr float kTextureAmplitude = 0.12f;

enum class Texture { Flat, HorizontalStripes, VerticalStripes, Checker };

struct SpriteConfig {
  int count = 64;
  std::uint64_t seed = 7;
  /// Probability that a sprite mixes parts across species instead of
  /// carrying one species' variant on every part.
  double mix_probability = 0.25;
  /// Whole-object shift in patches, drawn uniformly from [-jitter, jitter].
  int jitter = 0;
  float noise = 0.02f;
};

struct Sprite {
  Image image;
  /// Ground-truth label per patch (row-major kGridSide^2): 0 = background, 1..3 = part.
  std::vector<int> patch_labels;
  /// 0-based ground-truth variant for background and each part.
  std::array<int, kParts + 1> variants{};
  int species = 0;
};

std::array<float, 3> palette(int slot, int variant);
Texture texture_of(int slot);

/// Fixed left-right symmetric layout before jitter.
std::vector<int> base_layout();

Sprite render_sprite(const std::array<int, kParts + 1>& variants, int dx, int dy, float noise, Rng& rng);
std::vector<Sprite> make_corpus(const SpriteConfig& config);

/// Pixel-level ground-truth mask for a part label.
std::vector<std::uint8_t> patch_mask(const Sprite& sprite, int label);

}  // namespace partcraft::sprites
