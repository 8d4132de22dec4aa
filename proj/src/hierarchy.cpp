#include "partcraft/hierarchy.hpp"

#include "partcraft/error.hpp"
#include "partcraft/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace partcraft {

namespace {

Matrix round_to_float(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = static_cast<double>(static_cast<float>(out.data()[i]));
  return out;
}

Matrix gather(const Matrix& points, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), points.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points.row(rows[i]);
  return out;
}

RowVector to_row(std::span<const float> values) {
  RowVector r(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) r(static_cast<Eigen::Index>(i)) = values[i];
  return r;
}

}  // namespace

RowVector PartHierarchy::centroid(const PartCode& code) const {
  if (!fitted()) throw StateError("hierarchy is not fitted");
  if (code.slot < 0 || code.slot > parts || code.absent() || code.variant < 1 || code.variant > variants) {
    throw InputError("unknown part code (" + std::to_string(code.slot) + "," + std::to_string(code.variant) + ")");
  }
  return sub_centroids[code.slot].row(code.variant - 1);
}

void PartHierarchy::validate() const {
  if (parts < 1 || variants < 1 || dim < 1) throw InputError("hierarchy needs M, K, dim >= 1");
  if (fg_bg_centroids.rows() != 2 || fg_bg_centroids.cols() != dim) throw InputError("hierarchy needs 2 top-level centroids");
  if (part_centroids.rows() != parts || part_centroids.cols() != dim) throw InputError("hierarchy needs M part centroids");
  if (static_cast<int>(sub_centroids.size()) != parts + 1) throw InputError("hierarchy needs M+1 sub-centroid groups");
  for (const auto& g : sub_centroids) {
    if (g.rows() != variants || g.cols() != dim) throw InputError("sub-centroid group must hold K centroids");
    if (!g.allFinite()) throw InputError("non-finite sub-centroid");
  }
  if (!fg_bg_centroids.allFinite() || !part_centroids.allFinite()) throw InputError("non-finite centroid");
  if (background_index != 0 && background_index != 1) throw InputError("background index must be 0 or 1");
}

PartHierarchy fit_hierarchy(const std::vector<FeatureGrid>& features, int parts, int variants, std::uint64_t seed,
                            const ExtractorInfo& extractor, const HierarchyOptions& options) {
  if (features.empty()) throw InputError("cannot fit a part hierarchy on an empty corpus");
  if (parts < 1 || variants < 1) throw ConfigError("M and K must both be >= 1");
  const int dim = features.front().dim;
  Eigen::Index total = 0;
  for (const auto& g : features) {
    g.validate();
    if (g.dim != dim) throw InputError("feature grids disagree on dimension");
    total += g.cells();
  }
  if (total < std::max({2, parts, variants})) {
    throw ConfigError("corpus has " + std::to_string(total) + " patches, too few for the requested hierarchy");
  }

  Matrix points(total, dim);
  std::vector<bool> border(static_cast<std::size_t>(total), false);
  Eigen::Index row = 0;
  for (const auto& g : features) {
    for (int i = 0; i < g.cells(); ++i, ++row) {
      auto cell = g.cell(i);
      for (int d = 0; d < dim; ++d) points(row, d) = cell[d];
      const int r = i / g.cols, c = i % g.cols;
      border[row] = r == 0 || c == 0 || r == g.rows - 1 || c == g.cols - 1;
    }
  }

  KMeansOptions ko;
  ko.max_iterations = options.max_iterations;
  ko.tolerance = options.tolerance;

  PartHierarchy h;
  h.parts = parts;
  h.variants = variants;
  h.seed = seed;
  h.dim = dim;
  h.extractor = extractor;

  ko.k = 2;
  ko.seed = seed;
  KMeansResult top = kmeans(points, ko);
  h.fg_bg_centroids = round_to_float(top.centroids);
  int border_votes[2] = {0, 0};
  for (Eigen::Index i = 0; i < total; ++i)
    if (border[i]) ++border_votes[top.labels[i]];
  h.background_index = border_votes[1] > border_votes[0] ? 1 : 0;

  std::vector<Eigen::Index> fg_rows, bg_rows;
  for (Eigen::Index i = 0; i < total; ++i) (top.labels[i] == h.background_index ? bg_rows : fg_rows).push_back(i);
  if (static_cast<int>(fg_rows.size()) < parts) {
    throw ConfigError("foreground has " + std::to_string(fg_rows.size()) + " patches, fewer than M=" + std::to_string(parts));
  }

  ko.k = parts;
  ko.seed = seed + 1;
  Matrix fg_points = gather(points, fg_rows);
  KMeansResult mid = kmeans(fg_points, ko);
  h.part_centroids = round_to_float(mid.centroids);

  std::vector<std::vector<Eigen::Index>> groups(static_cast<std::size_t>(parts) + 1);
  groups[0] = bg_rows;
  for (std::size_t i = 0; i < fg_rows.size(); ++i) groups[mid.labels[i] + 1].push_back(fg_rows[i]);

  h.sub_centroids.resize(static_cast<std::size_t>(parts) + 1);
  for (int slot = 0; slot <= parts; ++slot) {
    const auto& rows = groups[slot];
    if (static_cast<int>(rows.size()) < variants) {
      const std::string name = slot == 0 ? "background cluster" : "part cluster " + std::to_string(slot);
      throw ConfigError(name + " has " + std::to_string(rows.size()) + " patches, fewer than K=" + std::to_string(variants));
    }
    ko.k = variants;
    ko.seed = seed + 2 + static_cast<std::uint64_t>(slot);
    h.sub_centroids[slot] = round_to_float(kmeans(gather(points, rows), ko).centroids);
  }
  h.validate();
  return h;
}

PartMaskSet downsample_masks(const PartMaskSet& native, GridSize target) {
  if (target.rows < 1 || target.cols < 1 || target.rows > native.grid_h || target.cols > native.grid_w) {
    throw InputError("mask grid must be between 1 and the native patch resolution");
  }
  if (target.rows == native.grid_h && target.cols == native.grid_w) return native;
  PartMaskSet out(native.slot_count(), target.rows, target.cols);
  out.present = native.present;
  const double sy = static_cast<double>(native.grid_h) / target.rows;
  const double sx = static_cast<double>(native.grid_w) / target.cols;
  for (int slot = 0; slot < native.slot_count(); ++slot) {
    if (!native.present[slot]) continue;
    for (int gr = 0; gr < target.rows; ++gr) {
      const double y0 = gr * sy, y1 = (gr + 1) * sy;
      for (int gc = 0; gc < target.cols; ++gc) {
        const double x0 = gc * sx, x1 = (gc + 1) * sx;
        double covered = 0.0;
        for (int r = static_cast<int>(std::floor(y0)); r < static_cast<int>(std::ceil(y1)); ++r) {
          const double oy = std::min<double>(r + 1, y1) - std::max<double>(r, y0);
          if (oy <= 0) continue;
          for (int c = static_cast<int>(std::floor(x0)); c < static_cast<int>(std::ceil(x1)); ++c) {
            const double ox = std::min<double>(c + 1, x1) - std::max<double>(c, x0);
            if (ox <= 0) continue;
            if (native.at(slot, r, c)) covered += ox * oy;
          }
        }
        if (covered >= 0.5 * sx * sy) out.masks[slot][static_cast<std::size_t>(gr) * target.cols + gc] = 1;
      }
    }
  }
  return out;
}

TagResult tag_features(const FeatureGrid& grid, const PartHierarchy& hierarchy, GridSize grid_resolution) {
  if (!hierarchy.fitted()) throw StateError("hierarchy is not fitted");
  grid.validate();
  if (grid.dim != hierarchy.dim) throw InputError("feature dimension does not match the hierarchy");
  if (grid_resolution.rows > grid.rows || grid_resolution.cols > grid.cols) {
    throw InputError("mask grid exceeds the native patch resolution");
  }
  const int slots = hierarchy.slot_count();
  TagResult out;
  out.native = {grid.rows, grid.cols};
  out.patches.resize(static_cast<std::size_t>(grid.cells()));
  PartMaskSet native(slots, grid.rows, grid.cols);
  std::vector<std::vector<int>> votes(static_cast<std::size_t>(slots), std::vector<int>(hierarchy.variants, 0));
  for (int i = 0; i < grid.cells(); ++i) {
    const RowVector x = to_row(grid.cell(i));
    PatchTag tag;
    if (nearest_centroid(hierarchy.fg_bg_centroids, x) == hierarchy.background_index) {
      tag.slot = 0;
    } else {
      tag.slot = 1 + nearest_centroid(hierarchy.part_centroids, x);
    }
    tag.variant = 1 + nearest_centroid(hierarchy.sub_centroids[tag.slot], x);
    out.patches[i] = tag;
    native.masks[tag.slot][i] = 1;
    native.present[tag.slot] = true;
    ++votes[tag.slot][tag.variant - 1];
  }
  out.composition.codes.resize(static_cast<std::size_t>(slots));
  for (int slot = 0; slot < slots; ++slot) {
    PartCode code{slot, PartCode::kAbsent};
    if (native.present[slot]) {
      const auto& v = votes[slot];
      code.variant = 1 + static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    }
    out.composition.codes[slot] = code;
  }
  out.masks = downsample_masks(native, grid_resolution);
  return out;
}

TagResult tag_image(const Image& image, const PartHierarchy& hierarchy, const FeatureExtractor& extractor,
                    GridSize grid_resolution) {
  if (!hierarchy.fitted()) throw StateError("hierarchy is not fitted");
  if (!(extractor.info() == hierarchy.extractor)) {
    throw ConfigError("extractor '" + extractor.info().name + "' differs from the one the hierarchy was fitted with");
  }
  return tag_features(extract_features(image, extractor), hierarchy, grid_resolution);
}

TagResult tag_image(const Image& image, const PartHierarchy& hierarchy, GridSize grid_resolution) {
  if (!hierarchy.fitted()) throw StateError("hierarchy is not fitted");
  auto extractor = make_extractor(hierarchy.extractor);
  return tag_image(image, hierarchy, *extractor, grid_resolution);
}

double cluster_purity(std::span<const int> clusters, std::span<const int> truth) {
  if (clusters.size() != truth.size() || clusters.empty()) throw InputError("purity needs equal, non-empty label lists");
  std::map<int, std::map<int, int>> table;
  for (std::size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][truth[i]];
  std::size_t agree = 0;
  for (const auto& [cluster, counts] : table) {
    int best = 0;
    for (const auto& [label, n] : counts) best = std::max(best, n);
    agree += static_cast<std::size_t>(best);
  }
  return static_cast<double>(agree) / static_cast<double>(clusters.size());
}

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw InputError("iou needs equal-size masks");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace partcraft
