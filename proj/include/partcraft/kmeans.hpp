#pragma once

#include "partcraft/tensor.hpp"

#include <cstdint>
#include <vector>

namespace partcraft {

struct KMeansOptions {
  int k = 2;
  std::uint64_t seed = 0;
  int max_iterations = 300;
  /// Stop once the relative drop in inertia falls below this.
  double tolerance = 1e-4;
};

struct KMeansResult {
  Matrix centroids;  // k x d
  std::vector<int> labels;
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding, Euclidean distance.
/// Empty clusters are re-seeded with the point farthest from its centroid.
KMeansResult kmeans(const Matrix& points, const KMeansOptions& options);

/// Index of the closest row of `centroids`; ties go to the lowest index.
int nearest_centroid(const Matrix& centroids, const Eigen::Ref<const RowVector>& point);

}  // namespace partcraft
