#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace partcraft {

/// Three zero-mean luminance textures over a P x P patch. Each one is
/// symmetric under a left-right flip so flipped images keep their codes.
///   0: horizontal stripes, 1: vertical stripes, 2: checker
/// Vectors are row-major over the patch and Gram-Schmidt orthogonalized; for
/// P divisible by 4 they are exactly the +-1 sign patterns.
class PatchBasis {
 public:
  static constexpr int kTextures = 3;

  explicit PatchBasis(int patch_size) : size_(patch_size) {
    const int n = patch_size * patch_size;
    auto row_sign = [&](int r) { return std::sin(2.0 * std::numbers::pi * (r + 0.5) / patch_size) >= 0 ? 1.0 : -1.0; };
    auto col_sign = [&](int c) { return std::cos(2.0 * std::numbers::pi * (c + 0.5) / patch_size) >= 0 ? 1.0 : -1.0; };
    for (auto& v : vectors_) v.assign(n, 0.0);
    for (int r = 0; r < patch_size; ++r) {
      for (int c = 0; c < patch_size; ++c) {
        vectors_[0][r * patch_size + c] = row_sign(r);
        vectors_[1][r * patch_size + c] = col_sign(c);
        vectors_[2][r * patch_size + c] = row_sign(r) * col_sign(c);
      }
    }
    for (int k = 0; k < kTextures; ++k) {
      auto& v = vectors_[k];
      double mean = 0;
      for (double x : v) mean += x;
      mean /= n;
      for (double& x : v) x -= mean;
      for (int j = 0; j < k; ++j) {
        double proj = dot(v, vectors_[j]) / norms_[j];
        for (int i = 0; i < n; ++i) v[i] -= proj * vectors_[j][i];
      }
      norms_[k] = std::max(dot(v, v), 1e-12);
    }
  }

  int patch_size() const { return size_; }
  const std::vector<double>& vector(int k) const { return vectors_[k]; }
  double value(int k, int r, int c) const { return vectors_[k][r * size_ + c]; }
  /// Squared norm, so that amplitude = <x, v> / squared_norm.
  double squared_norm(int k) const { return norms_[k]; }

 private:
  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }

  int size_;
  std::array<std::vector<double>, kTextures> vectors_;
  std::array<double, kTextures> norms_{};
};

}  // namespace partcraft
