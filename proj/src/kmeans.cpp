#include "partcraft/kmeans.hpp"

#include "partcraft/error.hpp"

#include <limits>

namespace partcraft {

namespace {

Matrix seed_plus_plus(const Matrix& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Matrix centroids(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centroids.row(0) = points.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (points.row(i) - centroids.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (double v : d2) total += v;
    Eigen::Index pick = 0;
    if (total <= 0) {
      pick = first(rng);
    } else {
      double target = unit(rng) * total;
      double acc = 0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    }
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

int nearest_centroid(const Matrix& centroids, const Eigen::Ref<const RowVector>& point) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    double d = (centroids.row(c) - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

KMeansResult kmeans(const Matrix& points, const KMeansOptions& options) {
  const Eigen::Index n = points.rows();
  if (options.k < 1) throw ConfigError("k-means needs k >= 1");
  if (n < options.k) {
    throw ConfigError("k-means with k=" + std::to_string(options.k) + " on only " + std::to_string(n) + " points");
  }
  Rng rng(options.seed);
  KMeansResult result;
  result.centroids = seed_plus_plus(points, options.k, rng);
  result.labels.assign(static_cast<std::size_t>(n), 0);

  double prev_inertia = std::numeric_limits<double>::infinity();
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    double inertia = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int c = nearest_centroid(result.centroids, points.row(i));
      result.labels[i] = c;
      dist[i] = (points.row(i) - result.centroids.row(c)).squaredNorm();
      inertia += dist[i];
    }
    result.inertia = inertia;
    result.iterations = iter;

    Matrix sums = Matrix::Zero(options.k, points.cols());
    std::vector<int> counts(options.k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(result.labels[i]) += points.row(i);
      ++counts[result.labels[i]];
    }
    for (int c = 0; c < options.k; ++c) {
      if (counts[c] > 0) {
        result.centroids.row(c) = sums.row(c) / counts[c];
        continue;
      }
      Eigen::Index far = 0;
      for (Eigen::Index i = 1; i < n; ++i)
        if (dist[i] > dist[far]) far = i;
      result.centroids.row(c) = points.row(far);
      dist[far] = 0;
    }

    const bool converged = std::isfinite(prev_inertia) &&
                           (prev_inertia - inertia) <= options.tolerance * std::max(prev_inertia, 1e-300);
    prev_inertia = inertia;
    if (converged) break;
  }
  // Final labels against the final centroids.
  double inertia = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int c = nearest_centroid(result.centroids, points.row(i));
    result.labels[i] = c;
    inertia += (points.row(i) - result.centroids.row(c)).squaredNorm();
  }
  result.inertia = inertia;
  return result;
}

}  // namespace partcraft
