#pragma once

#include "partcraft/image.hpp"

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace partcraft {

/// Dense patch features for one image: rows x cols cells of `dim` floats.
struct FeatureGrid {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  int patch_size = 0;
  std::string source_image_id;
  std::vector<float> data;

  int cells() const { return rows * cols; }
  std::span<const float> cell(int index) const { return {data.data() + static_cast<std::size_t>(index) * dim, static_cast<std::size_t>(dim)}; }
  std::span<float> cell(int index) { return {data.data() + static_cast<std::size_t>(index) * dim, static_cast<std::size_t>(dim)}; }

  /// Throws InputError on bad geometry or non-finite values.
  void validate() const;

  bool operator==(const FeatureGrid&) const = default;
};

/// Identifies the backend that produced a feature grid. Persisted with every
/// part dictionary so generated images are re-tagged with the same backend.
struct ExtractorInfo {
  std::string name;
  int input_resolution = 0;
  int patch_size = 0;

  int grid_side() const { return input_resolution / patch_size; }
  bool operator==(const ExtractorInfo&) const = default;
};

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual ExtractorInfo info() const = 0;
  /// Throws BackendError if the backend cannot produce a grid.
  virtual FeatureGrid extract(const Image& image) const = 0;
};

struct PatchDescriptorConfig {
  int input_resolution = 32;
  int patch_size = 4;
  double color_weight = 1.0;
  double texture_weight = 12.5;
  double saliency_weight = 20.0;
};

/// Hand-built patch descriptor: mean color, absolute texture amplitudes
/// along the PatchBasis directions, and total texture energy. Stands in for
/// a self-supervised ViT on small synthetic corpora.
class PatchDescriptorExtractor final : public FeatureExtractor {
 public:
  static constexpr const char* kName = "patch-descriptor-v1";
  static constexpr int kDim = 7;

  explicit PatchDescriptorExtractor(PatchDescriptorConfig config = {});

  ExtractorInfo info() const override;
  FeatureGrid extract(const Image& image) const override;

  const PatchDescriptorConfig& config() const { return config_; }

 private:
  PatchDescriptorConfig config_;
};

/// Resizes to the backend's input resolution, then delegates.
FeatureGrid extract_features(const Image& image, const FeatureExtractor& extractor, std::string image_id = {});

/// Rebuilds a built-in extractor from its persisted triple.
std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorInfo& info);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

}  // namespace partcraft
