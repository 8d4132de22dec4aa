#include "partcraft/dictionary.hpp"

#include "partcraft/error.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace partcraft {

using nlohmann::json;

namespace {

json matrix_rows(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(static_cast<float>(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix rows_matrix(const json& rows, int expected_cols) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), expected_cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != static_cast<std::size_t>(expected_cols)) throw InputError("centroid row has the wrong width");
    for (int c = 0; c < expected_cols; ++c) m(static_cast<Eigen::Index>(r), c) = static_cast<double>(rows[r][c].get<float>());
  }
  return m;
}

}  // namespace

PartMaskSet TaggedImage::masks(GridSize grid) const {
  const int slots = composition.slot_count();
  PartMaskSet native_masks(slots, native.rows, native.cols);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    native_masks.masks[patches[i].slot][i] = 1;
    native_masks.present[patches[i].slot] = true;
  }
  return downsample_masks(native_masks, grid);
}

const TaggedImage& PartDictionary::image(const std::string& id) const {
  for (const auto& img : images)
    if (img.id == id) return img;
  throw NotFoundError("no training image '" + id + "'");
}

std::string dictionary_to_json(const PartDictionary& dict, const std::filesystem::path& base_dir) {
  const PartHierarchy& h = dict.hierarchy;
  json j;
  j["schema"] = PartDictionary::kSchema;
  j["version"] = PartDictionary::kVersion;
  j["parts"] = h.parts;
  j["variants"] = h.variants;
  j["seed"] = h.seed;
  j["dim"] = h.dim;
  j["background_index"] = h.background_index;
  j["extractor"] = {{"name", h.extractor.name},
                    {"input_resolution", h.extractor.input_resolution},
                    {"patch_size", h.extractor.patch_size}};
  json sub = json::array();
  for (const auto& g : h.sub_centroids) sub.push_back(matrix_rows(g));
  j["centroids"] = {{"fg_bg", matrix_rows(h.fg_bg_centroids)}, {"parts", matrix_rows(h.part_centroids)}, {"sub", sub}};
  j["label_hints"] = dict.label_hints;
  json images = json::array();
  for (const auto& img : dict.images) {
    json e;
    e["id"] = img.id;
    std::filesystem::path p = img.path;
    if (!base_dir.empty() && !p.empty() && p.is_absolute()) {
      auto rel = p.lexically_relative(base_dir);
      if (!rel.empty() && rel.native().rfind("..", 0) != 0) p = rel;
    }
    e["path"] = p.generic_string();
    json codes = json::array();
    for (const auto& c : img.composition.codes) codes.push_back(c.absent() ? json(nullptr) : json(c.variant));
    e["composition"] = codes;
    e["grid"] = {img.native.rows, img.native.cols};
    json slots = json::array(), variants = json::array();
    for (const auto& t : img.patches) {
      slots.push_back(t.slot);
      variants.push_back(t.variant);
    }
    e["patch_slots"] = slots;
    e["patch_variants"] = variants;
    images.push_back(std::move(e));
  }
  j["images"] = images;
  return j.dump(1);
}

PartDictionary dictionary_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw InputError(std::string("part dictionary is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("schema", "") != PartDictionary::kSchema) throw InputError("not a part dictionary");
    if (j.at("version").get<int>() != PartDictionary::kVersion) {
      throw InputError("unsupported part dictionary version " + std::to_string(j.at("version").get<int>()));
    }
    PartDictionary dict;
    PartHierarchy& h = dict.hierarchy;
    h.parts = j.at("parts").get<int>();
    h.variants = j.at("variants").get<int>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.dim = j.at("dim").get<int>();
    h.background_index = j.at("background_index").get<int>();
    const auto& ex = j.at("extractor");
    h.extractor = {ex.at("name").get<std::string>(), ex.at("input_resolution").get<int>(), ex.at("patch_size").get<int>()};
    const auto& cj = j.at("centroids");
    h.fg_bg_centroids = rows_matrix(cj.at("fg_bg"), h.dim);
    h.part_centroids = rows_matrix(cj.at("parts"), h.dim);
    for (const auto& g : cj.at("sub")) h.sub_centroids.push_back(rows_matrix(g, h.dim));
    h.validate();
    if (j.contains("label_hints")) dict.label_hints = j.at("label_hints").get<std::map<std::string, std::string>>();
    for (const auto& e : j.at("images")) {
      TaggedImage img;
      img.id = e.at("id").get<std::string>();
      std::filesystem::path p = e.at("path").get<std::string>();
      img.path = (!p.empty() && p.is_relative() && !base_dir.empty()) ? base_dir / p : p;
      int slot = 0;
      for (const auto& c : e.at("composition")) {
        img.composition.codes.push_back({slot++, c.is_null() ? PartCode::kAbsent : c.get<int>()});
      }
      img.composition.validate(h.parts, h.variants);
      img.native = {e.at("grid").at(0).get<int>(), e.at("grid").at(1).get<int>()};
      const auto& slots = e.at("patch_slots");
      const auto& variants = e.at("patch_variants");
      if (slots.size() != variants.size() || slots.size() != static_cast<std::size_t>(img.native.rows * img.native.cols)) {
        throw InputError("patch tags for '" + img.id + "' do not match its grid");
      }
      for (std::size_t i = 0; i < slots.size(); ++i) img.patches.push_back({slots[i].get<int>(), variants[i].get<int>()});
      dict.images.push_back(std::move(img));
    }
    return dict;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed part dictionary: ") + e.what());
  }
}

void save_dictionary(const PartDictionary& dict, const std::filesystem::path& path) {
  auto base = std::filesystem::absolute(path).parent_path();
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << dictionary_to_json(dict, base) << '\n';
}

PartDictionary load_dictionary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open part dictionary " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return dictionary_from_json(ss.str(), std::filesystem::absolute(path).parent_path());
}

PartDictionary discover_parts(const std::vector<std::pair<std::string, Image>>& images, int parts, int variants,
                              std::uint64_t seed, const FeatureExtractor& extractor) {
  if (images.empty()) throw InputError("no images to discover parts from");
  std::vector<FeatureGrid> grids;
  grids.reserve(images.size());
  for (const auto& [id, img] : images) grids.push_back(extract_features(img, extractor, id));
  PartDictionary dict;
  dict.hierarchy = fit_hierarchy(grids, parts, variants, seed, extractor.info());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    TagResult tags = tag_features(grids[i], dict.hierarchy, {grids[i].rows, grids[i].cols});
    TaggedImage entry;
    entry.id = images[i].first;
    entry.composition = std::move(tags.composition);
    entry.native = tags.native;
    entry.patches = std::move(tags.patches);
    dict.images.push_back(std::move(entry));
  }
  return dict;
}

PartDictionary discover_parts(const std::vector<std::filesystem::path>& images, int parts, int variants,
                              std::uint64_t seed, const FeatureExtractor& extractor) {
  std::vector<std::pair<std::string, Image>> loaded;
  for (const auto& p : images) loaded.emplace_back(p.stem().string(), read_image(p));
  PartDictionary dict = discover_parts(loaded, parts, variants, seed, extractor);
  for (std::size_t i = 0; i < images.size(); ++i) dict.images[i].path = std::filesystem::absolute(images[i]);
  return dict;
}

}  // namespace partcraft
