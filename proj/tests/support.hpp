#pragma once

// Independent reference implementations and shared fixtures for the tests.
// The references are plain loops written from the definitions, sharing no
// code with the library beyond its data types.

#include "partcraft/dictionary.hpp"
#include "partcraft/evaluation.hpp"
#include "partcraft/sprites.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace partcraft::oracle {

// Attention loss straight from the definition: layer mean, per-location
// normalization across parts, clamped BCE averaged over every (part, location).
inline double reference_attention_loss(const std::vector<Matrix>& layers, const std::vector<int>& slots,
                                       const PartMaskSet& masks) {
  const int parts = static_cast<int>(slots.size());
  const int cells = masks.cells();
  const int n_layers = static_cast<int>(layers.size());
  std::vector<double> mean(static_cast<std::size_t>(parts) * cells, 0.0);
  for (int l = 0; l < n_layers; ++l)
    for (int p = 0; p < parts; ++p)
      for (int j = 0; j < cells; ++j) mean[p * cells + j] += layers[l](p, j) / n_layers;
  double total = 0.0;
  for (int j = 0; j < cells; ++j) {
    double denom = 0.0;
    for (int p = 0; p < parts; ++p) denom += mean[p * cells + j];
    if (denom < 1e-8) denom = 1e-8;
    for (int p = 0; p < parts; ++p) {
      double a = mean[p * cells + j] / denom;
      a = std::min(std::max(a, 1e-6), 1.0 - 1e-6);
      const double s = masks.masks[slots[p]][j];
      total += -(s * std::log(a) + (1.0 - s) * std::log(1.0 - a));
    }
  }
  return total / (static_cast<double>(parts) * cells);
}

// Central differences of f with respect to every entry of x.
inline Matrix finite_difference(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Max over entries of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

inline double brute_emr(const PartComposition& pred, const PartComposition& ref) {
  int compared = 0, matched = 0;
  for (std::size_t k = 0; k < ref.codes.size(); ++k) {
    if (ref.codes[k].variant == PartCode::kAbsent) continue;
    ++compared;
    if (pred.codes[k].variant == ref.codes[k].variant) ++matched;
  }
  return static_cast<double>(matched) / compared;
}

inline double brute_cosim(const PartComposition& pred, const PartComposition& ref, const PartHierarchy& h) {
  int compared = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < ref.codes.size(); ++k) {
    if (ref.codes[k].variant == PartCode::kAbsent) continue;
    ++compared;
    if (pred.codes[k].variant == PartCode::kAbsent) continue;
    const auto& g = h.sub_centroids[k];
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int d = 0; d < h.dim; ++d) {
      const double a = g(pred.codes[k].variant - 1, d), b = g(ref.codes[k].variant - 1, d);
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    sum += dot / std::sqrt(na * nb);
  }
  return sum / compared;
}

inline PartComposition random_composition(int parts, int variants, double absent_rate, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> v(1, variants);
  PartComposition c;
  for (int s = 0; s <= parts; ++s) c.codes.push_back({s, u(rng) < absent_rate ? PartCode::kAbsent : v(rng)});
  return c;
}

inline PartMaskSet random_masks(int slots, int h, int w, const std::vector<int>& present, Rng& rng) {
  PartMaskSet m(slots, h, w);
  std::bernoulli_distribution coin(0.4);
  for (int s : present) {
    m.present[s] = true;
    for (auto& cell : m.masks[s]) cell = coin(rng) ? 1 : 0;
  }
  return m;
}

// Layer maps with entries in [0.05, 0.95], away from the clamp.
inline std::vector<Matrix> random_layers(int layers, int parts, int cells, Rng& rng) {
  std::vector<Matrix> out;
  for (int l = 0; l < layers; ++l) out.push_back(rand_uniform(parts, cells, rng, 0.05, 0.95));
  return out;
}

struct ToyCorpus {
  std::vector<sprites::Sprite> sprites;
  std::vector<std::pair<std::string, Image>> images;
  PartDictionary dictionary;
};

// 32 sprites at mix 0.25, discovered with seed 1; built once per process.
inline const ToyCorpus& toy_corpus() {
  static const ToyCorpus corpus = [] {
    ToyCorpus c;
    sprites::SpriteConfig cfg;
    cfg.count = 32;
    c.sprites = sprites::make_corpus(cfg);
    for (std::size_t i = 0; i < c.sprites.size(); ++i) c.images.emplace_back("s" + std::to_string(i), c.sprites[i].image);
    PatchDescriptorExtractor extractor;
    c.dictionary = discover_parts(c.images, sprites::kParts, sprites::kVariants, 1, extractor);
    return c;
  }();
  return corpus;
}

// Fraction of items whose cluster's majority label equals their own label.
inline double reference_purity(const std::vector<int>& clusters, const std::vector<int>& truth) {
  std::map<int, std::map<int, int>> table;
  for (std::size_t i = 0; i < clusters.size(); ++i) table[clusters[i]][truth[i]]++;
  int agree = 0;
  for (const auto& [c, counts] : table) {
    int best = 0;
    for (const auto& [label, n] : counts) best = std::max(best, n);
    agree += best;
  }
  return static_cast<double>(agree) / static_cast<double>(clusters.size());
}

struct DiscoveryScores {
  double slot_purity = 0.0;
  double variant_purity = 0.0;
  double mean_iou = 0.0;
};

// Scores the dictionary's native patch tags against the generator's labels.
// IoU pairs each ground-truth label with the slot overlapping it most and is
// averaged over (image, label) pairs where the label occurs.
inline DiscoveryScores discovery_scores(const ToyCorpus& corpus) {
  std::vector<int> slot_pred, slot_truth, var_pred, var_truth;
  const int cells = sprites::kGridSide * sprites::kGridSide;
  const int slots = sprites::kParts + 1;
  std::vector<std::vector<int>> overlap(slots, std::vector<int>(slots, 0));
  for (std::size_t i = 0; i < corpus.sprites.size(); ++i) {
    const auto& tags = corpus.dictionary.images[i].patches;
    for (int p = 0; p < cells; ++p) {
      const int label = corpus.sprites[i].patch_labels[p];
      slot_pred.push_back(tags[p].slot);
      slot_truth.push_back(label);
      var_pred.push_back(tags[p].slot * 100 + tags[p].variant);
      var_truth.push_back(label * 100 + corpus.sprites[i].variants[label]);
      overlap[label][tags[p].slot]++;
    }
  }
  std::vector<int> slot_of(slots, 0);
  for (int l = 0; l < slots; ++l)
    slot_of[l] = static_cast<int>(std::max_element(overlap[l].begin(), overlap[l].end()) - overlap[l].begin());

  DiscoveryScores out;
  out.slot_purity = reference_purity(slot_pred, slot_truth);
  out.variant_purity = reference_purity(var_pred, var_truth);
  double iou_sum = 0.0;
  int iou_count = 0;
  for (std::size_t i = 0; i < corpus.sprites.size(); ++i) {
    const auto& tags = corpus.dictionary.images[i].patches;
    for (int l = 0; l < slots; ++l) {
      int inter = 0, uni = 0, truth = 0;
      for (int p = 0; p < cells; ++p) {
        const bool t = corpus.sprites[i].patch_labels[p] == l;
        const bool q = tags[p].slot == slot_of[l];
        truth += t;
        inter += t && q;
        uni += t || q;
      }
      if (truth == 0) continue;
      iou_sum += static_cast<double>(inter) / uni;
      ++iou_count;
    }
  }
  out.mean_iou = iou_sum / iou_count;
  return out;
}

inline std::vector<TrainingExample> toy_examples(const ToyCorpus& corpus, GridSize grid, std::size_t count) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < corpus.images.size() && i < count; ++i) {
    const auto& tag = corpus.dictionary.images[i];
    out.push_back({tag.id, corpus.images[i].second, tag.composition, tag.masks(grid)});
  }
  return out;
}

// Attention settings that fit the toy backend.
inline TrainingConfig toy_config(const backend::BaseModel& base) {
  TrainingConfig c;
  c.attention_layers = base.denoiser.attention_layers();
  c.attention_resolution = base.autoencoder.grid().rows;
  c.image_resolution = base.autoencoder.image_side();
  c.learning_rate = 3e-3;
  return c;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("partcraft-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace partcraft::oracle
