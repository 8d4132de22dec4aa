#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace partcraft {

/// Row-major dense matrix used for every numeric array in the library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

inline Matrix randn(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Matrix rand_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// FNV-1a over raw bytes; used for content fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace partcraft
