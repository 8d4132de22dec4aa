#pragma once

#include "partcraft/features.hpp"
#include "partcraft/parts.hpp"
#include "partcraft/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace partcraft {

struct GridSize {
  int rows = 0;
  int cols = 0;
  bool operator==(const GridSize&) const = default;
};

/// Three-tier part clustering: fg/bg split, M part centroids over the
/// foreground, K sub-centroids within each part and within the background.
///
/// Centroids are held as doubles rounded to float32, which is also their
/// persisted precision, so a saved and reloaded hierarchy tags identically.
struct PartHierarchy {
  int parts = 0;
  int variants = 0;
  std::uint64_t seed = 0;
  int dim = 0;
  int background_index = 0;
  ExtractorInfo extractor;
  Matrix fg_bg_centroids;               // 2 x dim
  Matrix part_centroids;                // M x dim, row m-1 is slot m
  std::vector<Matrix> sub_centroids;    // M+1 groups of K x dim, group 0 = background

  bool fitted() const { return parts > 0 && static_cast<int>(sub_centroids.size()) == parts + 1; }
  int slot_count() const { return parts + 1; }

  /// Sub-centroid of a present code; throws InputError for unknown codes.
  RowVector centroid(const PartCode& code) const;

  /// Throws InputError when shapes or values break the hierarchy invariants.
  void validate() const;
};

struct HierarchyOptions {
  int max_iterations = 300;
  double tolerance = 1e-4;
};

/// Fits the hierarchy. Throws InputError on an empty corpus and ConfigError
/// when a level has fewer patches than clusters requested of it.
PartHierarchy fit_hierarchy(const std::vector<FeatureGrid>& features, int parts, int variants, std::uint64_t seed,
                            const ExtractorInfo& extractor, const HierarchyOptions& options = {});

struct PatchTag {
  int slot = 0;
  int variant = 1;
  bool operator==(const PatchTag&) const = default;
};

struct TagResult {
  PartComposition composition;
  PartMaskSet masks;
  /// Native-resolution tag per patch, row-major.
  std::vector<PatchTag> patches;
  GridSize native;
};

TagResult tag_features(const FeatureGrid& grid, const PartHierarchy& hierarchy, GridSize grid_resolution);

/// Extracts features with `extractor` and tags every patch.
TagResult tag_image(const Image& image, const PartHierarchy& hierarchy, const FeatureExtractor& extractor,
                    GridSize grid_resolution);
/// Same, rebuilding the extractor from the hierarchy's persisted triple.
TagResult tag_image(const Image& image, const PartHierarchy& hierarchy, GridSize grid_resolution);

/// Native patch masks reduced to a coarser grid: a cell is set when at least
/// half of the area it covers belongs to the slot.
PartMaskSet downsample_masks(const PartMaskSet& native, GridSize target);

/// Fraction of items whose cluster's majority ground-truth label equals their own.
double cluster_purity(std::span<const int> clusters, std::span<const int> truth);
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

}  // namespace partcraft
