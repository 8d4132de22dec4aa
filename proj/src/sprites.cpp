#include "partcraft/sprites.hpp"

#include "partcraft/error.hpp"
#include "partcraft/patch_basis.hpp"

#include <algorithm>

namespace partcraft::sprites {

namespace {

// Species colors shared by every part, nudged per part so a species reads
// as one creature without making parts identical.
constexpr std::array<std::array<float, 3>, kVariants> kSpeciesColors = {{
    {0.80f, 0.26f, 0.24f},
    {0.80f, 0.74f, 0.22f},
    {0.24f, 0.32f, 0.80f},
    {0.24f, 0.74f, 0.34f},
}};

constexpr std::array<std::array<float, 3>, kVariants> kBackgroundColors = {{
    {0.55f, 0.55f, 0.55f},
    {0.78f, 0.64f, 0.48f},
    {0.42f, 0.60f, 0.72f},
    {0.62f, 0.72f, 0.46f},
}};

}  // namespace

std::array<float, 3> palette(int slot, int variant) {
  if (variant < 0 || variant >= kVariants || slot < 0 || slot > kParts) throw InputError("sprite palette index out of range");
  if (slot == 0) return kBackgroundColors[variant];
  auto c = kSpeciesColors[variant];
  const float shift = 0.04f * static_cast<float>(slot - 2);
  for (auto& v : c) v = std::clamp(v + shift, 0.0f, 1.0f);
  return c;
}

Texture texture_of(int slot) {
  switch (slot) {
    case 0: return Texture::Flat;
    case 1: return Texture::Checker;
    case 2: return Texture::HorizontalStripes;
    case 3: return Texture::VerticalStripes;
    default: throw InputError("sprite slot out of range");
  }
}

std::vector<int> base_layout() {
  std::vector<int> labels(kGridSide * kGridSide, 0);
  auto fill = [&](int r0, int r1, int c0, int c1, int label) {
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) labels[r * kGridSide + c] = label;
  };
  fill(1, 2, 2, 5, 1);  // head
  fill(3, 5, 1, 6, 2);  // body
  fill(6, 7, 2, 5, 3);  // tail
  return labels;
}

Sprite render_sprite(const std::array<int, kParts + 1>& variants, int dx, int dy, float noise, Rng& rng) {
  static const PatchBasis basis(kPatchSize);
  Sprite s;
  s.variants = variants;
  auto base = base_layout();
  s.patch_labels.assign(base.size(), 0);
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c < kGridSide; ++c) {
      int sr = r - dy, sc = c - dx;
      if (sr >= 0 && sr < kGridSide && sc >= 0 && sc < kGridSide) s.patch_labels[r * kGridSide + c] = base[sr * kGridSide + sc];
    }
  }
  s.image = Image(kImageSide, kImageSide);
  std::normal_distribution<float> gauss(0.0f, noise);
  for (int pr = 0; pr < kGridSide; ++pr) {
    for (int pc = 0; pc < kGridSide; ++pc) {
      const int label = s.patch_labels[pr * kGridSide + pc];
      const auto color = palette(label, variants[label]);
      const Texture tex = texture_of(label);
      for (int r = 0; r < kPatchSize; ++r) {
        for (int c = 0; c < kPatchSize; ++c) {
          double t = 0.0;
          switch (tex) {
            case Texture::Flat: break;
            case Texture::HorizontalStripes: t = basis.value(0, r, c); break;
            case Texture::VerticalStripes: t = basis.value(1, r, c); break;
            case Texture::Checker: t = basis.value(2, r, c); break;
          }
          for (int ch = 0; ch < 3; ++ch) {
            float v = color[ch] + kTextureAmplitude * static_cast<float>(t);
            if (noise > 0) v += gauss(rng);
            s.image.at(pc * kPatchSize + c, pr * kPatchSize + r, ch) = std::clamp(v, 0.0f, 1.0f);
          }
        }
      }
    }
  }
  return s;
}

std::vector<Sprite> make_corpus(const SpriteConfig& config) {
  if (config.count <= 0) throw InputError("sprite corpus needs a positive count");
  Rng rng(config.seed);
  std::uniform_int_distribution<int> variant_dist(0, kVariants - 1);
  std::uniform_int_distribution<int> jitter_dist(-config.jitter, config.jitter);
  std::bernoulli_distribution mix(config.mix_probability);
  std::vector<Sprite> out;
  out.reserve(config.count);
  for (int i = 0; i < config.count; ++i) {
    std::array<int, kParts + 1> v{};
    const int species = variant_dist(rng);
    v[0] = variant_dist(rng);
    const bool mixed = mix(rng);
    for (int p = 1; p <= kParts; ++p) v[p] = mixed ? variant_dist(rng) : species;
    int dx = jitter_dist(rng), dy = jitter_dist(rng);
    Sprite s = render_sprite(v, dx, dy, config.noise, rng);
    s.species = species;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::uint8_t> patch_mask(const Sprite& sprite, int label) {
  std::vector<std::uint8_t> m(sprite.patch_labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = sprite.patch_labels[i] == label ? 1 : 0;
  return m;
}

}  // namespace partcraft::sprites
