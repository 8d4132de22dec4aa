#pragma once

#include "partcraft/hierarchy.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace partcraft {

/// Tags recorded for one training image at discovery time.
struct TaggedImage {
  std::string id;
  std::filesystem::path path;
  PartComposition composition;
  GridSize native;
  std::vector<PatchTag> patches;

  /// Masks at `grid`, derived from the native patch tags.
  PartMaskSet masks(GridSize grid) const;
};

/// The persisted output of part discovery.
struct PartDictionary {
  static constexpr const char* kSchema = "partcraft.part-dictionary";
  static constexpr int kVersion = 1;

  PartHierarchy hierarchy;
  std::vector<TaggedImage> images;
  /// Optional human labels keyed by "slot:variant".
  std::map<std::string, std::string> label_hints;

  const TaggedImage& image(const std::string& id) const;
};

void save_dictionary(const PartDictionary& dict, const std::filesystem::path& path);
/// Relative image paths are resolved against the dictionary's directory.
PartDictionary load_dictionary(const std::filesystem::path& path);

std::string dictionary_to_json(const PartDictionary& dict, const std::filesystem::path& base_dir = {});
PartDictionary dictionary_from_json(const std::string& text, const std::filesystem::path& base_dir = {});

/// Extracts features for every image, fits the hierarchy and tags the corpus.
PartDictionary discover_parts(const std::vector<std::filesystem::path>& images, int parts, int variants,
                              std::uint64_t seed, const FeatureExtractor& extractor);
PartDictionary discover_parts(const std::vector<std::pair<std::string, Image>>& images, int parts, int variants,
                              std::uint64_t seed, const FeatureExtractor& extractor);

}  // namespace partcraft
