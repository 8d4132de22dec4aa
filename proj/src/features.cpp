#include "partcraft/features.hpp"

#include "partcraft/error.hpp"
#include "partcraft/patch_basis.hpp"

#include <cmath>

namespace partcraft {

void FeatureGrid::validate() const {
  if (rows < 1 || cols < 1 || dim < 1) throw InputError("feature grid has empty geometry");
  if (data.size() != static_cast<std::size_t>(rows) * cols * dim) throw InputError("feature grid size mismatch");
  for (float v : data) {
    if (!std::isfinite(v)) throw InputError("feature grid has non-finite values");
  }
}

PatchDescriptorExtractor::PatchDescriptorExtractor(PatchDescriptorConfig config) : config_(config) {
  if (config_.patch_size < 2 || config_.input_resolution < config_.patch_size ||
      config_.input_resolution % config_.patch_size != 0) {
    throw ConfigError("input resolution must be a positive multiple of the patch size");
  }
}

ExtractorInfo PatchDescriptorExtractor::info() const {
  return {kName, config_.input_resolution, config_.patch_size};
}

FeatureGrid PatchDescriptorExtractor::extract(const Image& image) const {
  const int p = config_.patch_size;
  if (image.width != config_.input_resolution || image.height != config_.input_resolution) {
    throw BackendError("patch descriptor expects " + std::to_string(config_.input_resolution) + "px input");
  }
  static thread_local std::unique_ptr<PatchBasis> basis;
  if (!basis || basis->patch_size() != p) basis = std::make_unique<PatchBasis>(p);

  FeatureGrid grid;
  grid.rows = grid.cols = image.height / p;
  grid.dim = kDim;
  grid.patch_size = p;
  grid.data.assign(static_cast<std::size_t>(grid.cells()) * kDim, 0.0f);
  const double n = static_cast<double>(p) * p;
  for (int pr = 0; pr < grid.rows; ++pr) {
    for (int pc = 0; pc < grid.cols; ++pc) {
      double mean[3] = {0, 0, 0};
      double amp[PatchBasis::kTextures] = {0, 0, 0};
      for (int r = 0; r < p; ++r) {
        for (int c = 0; c < p; ++c) {
          double lum = 0;
          for (int ch = 0; ch < 3; ++ch) {
            double v = image.at(pc * p + c, pr * p + r, ch);
            mean[ch] += v;
            lum += v;
          }
          lum /= 3.0;
          for (int k = 0; k < PatchBasis::kTextures; ++k) amp[k] += lum * basis->value(k, r, c);
        }
      }
      auto out = grid.cell(pr * grid.cols + pc);
      double energy = 0;
      for (int ch = 0; ch < 3; ++ch) out[ch] = static_cast<float>(config_.color_weight * mean[ch] / n);
      for (int k = 0; k < PatchBasis::kTextures; ++k) {
        double a = amp[k] / basis->squared_norm(k);
        energy += a * a;
        out[3 + k] = static_cast<float>(config_.texture_weight * std::abs(a));
      }
      out[6] = static_cast<float>(config_.saliency_weight * std::sqrt(energy));
    }
  }
  return grid;
}

FeatureGrid extract_features(const Image& image, const FeatureExtractor& extractor, std::string image_id) {
  if (image.empty()) throw InputError("cannot extract features from an empty image");
  const ExtractorInfo info = extractor.info();
  const bool native = image.width == info.input_resolution && image.height == info.input_resolution;
  FeatureGrid grid;
  try {
    grid = native ? extractor.extract(image) : extractor.extract(resize(image, info.input_resolution, info.input_resolution));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(info.name + " failed: " + e.what());
  }
  grid.source_image_id = std::move(image_id);
  try {
    grid.validate();
  } catch (const InputError& e) {
    throw BackendError(info.name + " produced an invalid grid: " + e.what());
  }
  return grid;
}

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorInfo& info) {
  if (info.name == PatchDescriptorExtractor::kName) {
    PatchDescriptorConfig cfg;
    cfg.input_resolution = info.input_resolution;
    cfg.patch_size = info.patch_size;
    return std::make_unique<PatchDescriptorExtractor>(cfg);
  }
  throw ConfigError("unknown feature extractor '" + info.name + "'");
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace partcraft
