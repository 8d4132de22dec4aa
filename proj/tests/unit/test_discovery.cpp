#include "partcraft/dictionary.hpp"
#include "partcraft/error.hpp"
#include "partcraft/kmeans.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace partcraft;
using partcraft::oracle::toy_corpus;

namespace {

// Three well separated blobs in 2-D.
Matrix blobs(Rng& rng, std::vector<int>& truth) {
  const double centers[3][2] = {{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}};
  Matrix pts(90, 2);
  for (int i = 0; i < 90; ++i) {
    const int c = i % 3;
    const Matrix noise = randn(1, 2, rng, 0.5);
    pts(i, 0) = centers[c][0] + noise(0, 0);
    pts(i, 1) = centers[c][1] + noise(0, 1);
    truth.push_back(c);
  }
  return pts;
}

}  // namespace

TEST(KMeans, RecoversSeparatedBlobs) {
  Rng rng(3);
  std::vector<int> truth;
  const Matrix pts = blobs(rng, truth);
  KMeansOptions o;
  o.k = 3;
  o.seed = 11;
  const auto r = kmeans(pts, o);
  EXPECT_DOUBLE_EQ(oracle::reference_purity(r.labels, truth), 1.0);
  for (int i = 0; i < pts.rows(); ++i) EXPECT_EQ(r.labels[i], nearest_centroid(r.centroids, pts.row(i)));
}

TEST(KMeans, SameSeedSameResult) {
  Rng rng(4);
  std::vector<int> truth;
  const Matrix pts = blobs(rng, truth);
  KMeansOptions o;
  o.k = 4;
  o.seed = 2;
  const auto a = kmeans(pts, o), b = kmeans(pts, o);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.centroids, b.centroids);
}

TEST(KMeans, NearestCentroidBreaksTiesLow) {
  Matrix c(2, 1);
  c << -1.0, 1.0;
  RowVector x(1);
  x << 0.0;
  EXPECT_EQ(nearest_centroid(c, x), 0);
}

TEST(Features, PatchDescriptorGridMatchesPatchLayout) {
  const auto& corpus = toy_corpus();
  PatchDescriptorExtractor ex;
  const auto grid = extract_features(corpus.images[0].second, ex, "s0");
  EXPECT_EQ(grid.rows, sprites::kGridSide);
  EXPECT_EQ(grid.cols, sprites::kGridSide);
  EXPECT_EQ(grid.dim, PatchDescriptorExtractor::kDim);
  EXPECT_NO_THROW(grid.validate());
  EXPECT_EQ(ex.info().grid_side(), sprites::kGridSide);
  EXPECT_EQ(make_extractor(ex.info())->info(), ex.info());
}

TEST(Discovery, SlotsMatchGeneratorPartsOnToySprites) {
  const auto scores = oracle::discovery_scores(toy_corpus());
  EXPECT_GE(scores.slot_purity, 0.9);
  EXPECT_GE(scores.variant_purity, 0.9);
  EXPECT_GE(scores.mean_iou, 0.8);
}

TEST(Discovery, HierarchyInvariantsHold) {
  const auto& h = toy_corpus().dictionary.hierarchy;
  EXPECT_NO_THROW(h.validate());
  EXPECT_EQ(h.parts, sprites::kParts);
  EXPECT_EQ(h.variants, sprites::kVariants);
  EXPECT_EQ(h.slot_count(), 4);
  for (const auto& g : h.sub_centroids)
    for (Eigen::Index i = 0; i < g.size(); ++i) EXPECT_EQ(g.data()[i], static_cast<double>(static_cast<float>(g.data()[i])));
  EXPECT_THROW(h.centroid({0, PartCode::kAbsent}), InputError);
  EXPECT_THROW(h.centroid({4, 1}), InputError);
}

TEST(Discovery, TagsAreConsistentWithMasksAndComposition) {
  const auto& corpus = toy_corpus();
  for (const auto& tag : corpus.dictionary.images) {
    const auto native = tag.masks(tag.native);
    for (int s = 0; s < 4; ++s) {
      EXPECT_EQ(native.present[s], !tag.composition.codes[s].absent());
    }
    // every native patch belongs to exactly one slot
    for (int p = 0; p < native.cells(); ++p) {
      int owners = 0;
      for (int s = 0; s < 4; ++s) owners += native.masks[s][p];
      EXPECT_EQ(owners, 1);
    }
  }
}

TEST(Discovery, ReTaggingReproducesStoredTags) {
  const auto& corpus = toy_corpus();
  for (std::size_t i = 0; i < 8; ++i) {
    const auto t = tag_image(corpus.images[i].second, corpus.dictionary.hierarchy, {8, 8});
    EXPECT_EQ(t.composition, corpus.dictionary.images[i].composition);
    EXPECT_EQ(t.patches, corpus.dictionary.images[i].patches);
  }
}

TEST(Discovery, SameSeedIsDeterministic) {
  const auto& corpus = toy_corpus();
  PatchDescriptorExtractor ex;
  const auto again = discover_parts(corpus.images, 3, 4, 1, ex);
  EXPECT_EQ(dictionary_to_json(again), dictionary_to_json(corpus.dictionary));
}

TEST(Discovery, TooFewPatchesIsAConfigError) {
  const auto& corpus = toy_corpus();
  PatchDescriptorExtractor ex;
  std::vector<std::pair<std::string, Image>> one(corpus.images.begin(), corpus.images.begin() + 1);
  EXPECT_THROW(discover_parts(one, 3, 40, 1, ex), ConfigError);
  EXPECT_THROW(discover_parts(std::vector<std::pair<std::string, Image>>{}, 3, 4, 1, ex), InputError);
}

TEST(Dictionary, JsonRoundTripTagsIdentically) {
  const auto& corpus = toy_corpus();
  const auto back = dictionary_from_json(dictionary_to_json(corpus.dictionary));
  EXPECT_EQ(dictionary_to_json(back), dictionary_to_json(corpus.dictionary));
  for (std::size_t i = 0; i < 4; ++i) {
    const auto a = tag_image(corpus.images[i].second, corpus.dictionary.hierarchy, {4, 4});
    const auto b = tag_image(corpus.images[i].second, back.hierarchy, {4, 4});
    EXPECT_EQ(a.patches, b.patches);
    EXPECT_EQ(a.masks, b.masks);
  }
  EXPECT_THROW(dictionary_from_json("{\"schema\": \"other\"}"), InputError);
  EXPECT_THROW(dictionary_from_json("not json"), InputError);
}

TEST(Dictionary, LookupByIdThrowsNotFound) {
  const auto& dict = toy_corpus().dictionary;
  EXPECT_EQ(dict.image("s3").id, "s3");
  EXPECT_THROW(dict.image("missing"), NotFoundError);
}

TEST(Masks, DownsampleUsesHalfCoverage) {
  PartMaskSet native(2, 4, 4);
  native.present = {true, true};
  // slot 1 covers 2 of 4 cells in the top-left block, 1 of 4 in the top-right
  native.masks[1] = {1, 1, 1, 0,
                     0, 0, 0, 0,
                     0, 0, 0, 0,
                     0, 0, 0, 0};
  const auto down = downsample_masks(native, {2, 2});
  EXPECT_EQ(down.masks[1], (std::vector<std::uint8_t>{1, 0, 0, 0}));
  EXPECT_THROW(downsample_masks(native, {8, 8}), InputError);
  EXPECT_EQ(downsample_masks(native, {4, 4}), native);
}

TEST(Metrics, PurityAndIouAgreeWithHandValues) {
  const std::vector<int> clusters = {0, 0, 0, 1, 1, 2};
  const std::vector<int> truth = {5, 5, 6, 6, 6, 7};
  EXPECT_DOUBLE_EQ(cluster_purity(clusters, truth), 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(oracle::reference_purity(clusters, truth), 5.0 / 6.0);
  const std::vector<std::uint8_t> a = {1, 1, 0, 0}, b = {0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
}
