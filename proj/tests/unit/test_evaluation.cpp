#include "partcraft/error.hpp"
#include "partcraft/evaluation.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <mutex>
#include <set>

using namespace partcraft;

namespace {

std::vector<EvalImage> toy_eval_corpus() {
  const auto& corpus = oracle::toy_corpus();
  std::vector<EvalImage> out;
  for (const auto& [id, img] : corpus.images) out.push_back({id, img});
  return out;
}

// Tags computed here rather than through the evaluator.
std::map<std::string, PartComposition> reference_tags(const std::vector<EvalImage>& corpus, const PartHierarchy& h) {
  const GridSize native{h.extractor.grid_side(), h.extractor.grid_side()};
  std::map<std::string, PartComposition> out;
  for (const auto& e : corpus) out[e.id] = tag_image(e.image, h, native).composition;
  return out;
}

// Renders a composition by returning a corpus image tagged with exactly that
// composition, or a blank image when none exists. Records every request.
class LookupGenerator final : public ImageGenerator {
 public:
  LookupGenerator(const std::vector<EvalImage>& corpus, const std::map<std::string, PartComposition>& tags) {
    for (const auto& e : corpus) by_tag_.emplace(format_composition(tags.at(e.id)), e.image);
  }
  GenerationResult generate(const GenerationRequest& request) const override {
    std::lock_guard lock(mu_);
    requests.push_back(request);
    GenerationResult out;
    const auto it = by_tag_.find(format_composition(request.composition));
    out.image = it != by_tag_.end() ? it->second : Image(32, 32, 0.0f);
    return out;
  }
  int parts() const override { return 3; }
  int variants() const override { return 4; }

  mutable std::vector<GenerationRequest> requests;

 private:
  std::map<std::string, Image> by_tag_;
  mutable std::mutex mu_;
};

}  // namespace

TEST(Metrics, EmrAndCosimMatchBruteForceOnRandomPairs) {
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  Rng rng(17);
  int checked = 0;
  while (checked < 1000) {
    const auto ref = oracle::random_composition(3, 4, 0.3, rng);
    const auto pred = oracle::random_composition(3, 4, 0.3, rng);
    if (ref.present_count() == 0) continue;
    EXPECT_EQ(emr(pred, ref), oracle::brute_emr(pred, ref));
    EXPECT_NEAR(cosim(pred, ref, h), oracle::brute_cosim(pred, ref, h), 1e-6);
    ++checked;
  }
}

TEST(Metrics, IdenticalCompositionsScoreOne) {
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  const auto c = parse_composition("0:2,1:1,3:4", 3);
  EXPECT_EQ(emr(c, c), 1.0);
  EXPECT_NEAR(cosim(c, c, h), 1.0, 1e-12);
  // a slot the generation lost counts as a miss, a slot absent from the target is ignored
  EXPECT_NEAR(emr(parse_composition("0:2,1:1", 3), c), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(emr(parse_composition("0:2,1:1,2:3,3:4", 3), c), 1.0);
}

TEST(Metrics, RejectMismatchedOrEmptyReferences) {
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  const auto c = parse_composition("0:1", 3);
  EXPECT_THROW(emr(c, parse_composition("0:1", 2)), InputError);
  EXPECT_THROW(emr(c, parse_composition("", 3)), InputError);
  EXPECT_THROW(cosim(c, parse_composition("", 3), h), InputError);
  EXPECT_THROW(cosim(parse_composition("0:1", 4), parse_composition("0:1", 4), h), InputError);
}

TEST(Protocol, NamesParse) {
  EXPECT_EQ(eval_protocol_from_string("recon"), EvalProtocol::Reconstruction);
  EXPECT_EQ(eval_protocol_from_string("composition"), EvalProtocol::Composition);
  EXPECT_STREQ(to_string(EvalProtocol::Composition), "composition");
  EXPECT_THROW(eval_protocol_from_string("mix"), ConfigError);
}

TEST(EvalComposition, ReconstructionOfAFaithfulGeneratorScoresOne) {
  const auto corpus = toy_eval_corpus();
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  const auto tags = reference_tags(corpus, h);
  LookupGenerator gen(corpus, tags);
  EvalOptions o;
  o.samples = 40;
  o.seed = 3;
  const auto report = eval_reconstruction(corpus, gen, h, o);
  EXPECT_EQ(report.protocol, EvalProtocol::Reconstruction);
  EXPECT_EQ(report.n_samples, 40);
  EXPECT_EQ(report.emr, 1.0);
  EXPECT_NEAR(report.cosim, 1.0, 1e-12);
  ASSERT_EQ(gen.requests.size(), 40u);
  // the first pass visits every image once
  std::set<std::string> bases;
  for (int i = 0; i < 32; ++i) bases.insert(report.samples[i].base_id);
  EXPECT_EQ(bases.size(), 32u);
  for (std::size_t i = 0; i < report.samples.size(); ++i) {
    const auto& s = report.samples[i];
    EXPECT_TRUE(s.donor_ids.empty());
    EXPECT_TRUE(s.swapped_slots.empty());
    EXPECT_EQ(s.target, tags.at(s.base_id));
    EXPECT_EQ(gen.requests[i].composition, s.target);
    EXPECT_EQ(gen.requests[i].seed, s.generation_seed);
  }
}

TEST(EvalComposition, DonorsAreDistinctAndSlotsArePoppedWithoutReplacement) {
  const auto corpus = toy_eval_corpus();
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  const auto tags = reference_tags(corpus, h);
  for (int mix = 2; mix <= 4; ++mix) {
    LookupGenerator gen(corpus, tags);
    EvalOptions o;
    o.samples = 60;
    o.parts_mixed = mix;
    o.seed = 11;
    const auto report = eval_composition(corpus, gen, h, o);
    EXPECT_EQ(report.protocol, EvalProtocol::Composition);
    EXPECT_EQ(report.n_composited_parts, mix);
    std::set<int> slots_seen;
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
      const auto& s = report.samples[i];
      ASSERT_EQ(s.donor_ids.size(), static_cast<std::size_t>(mix - 1));
      ASSERT_EQ(s.swapped_slots.size(), static_cast<std::size_t>(mix - 1));
      std::set<std::string> images(s.donor_ids.begin(), s.donor_ids.end());
      images.insert(s.base_id);
      EXPECT_EQ(images.size(), static_cast<std::size_t>(mix));
      const std::set<int> slots(s.swapped_slots.begin(), s.swapped_slots.end());
      EXPECT_EQ(slots.size(), s.swapped_slots.size());
      slots_seen.insert(slots.begin(), slots.end());
      // target: base tags with each swapped slot copied from its donor, absence included
      PartComposition expected = tags.at(s.base_id);
      for (std::size_t d = 0; d < s.swapped_slots.size(); ++d) {
        const int slot = s.swapped_slots[d];
        ASSERT_GE(slot, 0);
        ASSERT_LE(slot, 3);
        expected.codes[slot] = tags.at(s.donor_ids[d]).codes[slot];
      }
      EXPECT_EQ(s.target, expected);
      EXPECT_EQ(gen.requests[i].composition, s.target);
      EXPECT_DOUBLE_EQ(s.emr, emr(s.predicted, s.target));
    }
    // background is part of the pool
    EXPECT_EQ(slots_seen, (std::set<int>{0, 1, 2, 3}));
  }
}

TEST(EvalComposition, SameSeedSameSamplesAndPerSlotTotalsAgree) {
  const auto corpus = toy_eval_corpus();
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  const auto tags = reference_tags(corpus, h);
  LookupGenerator g1(corpus, tags), g2(corpus, tags);
  EvalOptions o;
  o.samples = 25;
  o.parts_mixed = 3;
  o.seed = 5;
  const auto a = eval_composition(corpus, g1, h, o);
  const auto b = eval_composition(corpus, g2, h, o);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  double emr_sum = 0.0;
  int compared = 0, matched = 0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].base_id, b.samples[i].base_id);
    EXPECT_EQ(a.samples[i].donor_ids, b.samples[i].donor_ids);
    EXPECT_EQ(a.samples[i].swapped_slots, b.samples[i].swapped_slots);
    EXPECT_EQ(a.samples[i].generation_seed, b.samples[i].generation_seed);
    emr_sum += a.samples[i].emr;
    for (const auto& code : a.samples[i].target.codes) {
      if (code.absent()) continue;
      ++compared;
      matched += a.samples[i].predicted.codes[code.slot] == code;
    }
  }
  EXPECT_NEAR(a.emr, emr_sum / 25, 1e-12);
  int slot_compared = 0, slot_matched = 0;
  for (const auto& s : a.per_slot) {
    slot_compared += s.compared;
    slot_matched += s.matched;
  }
  EXPECT_EQ(slot_compared, compared);
  EXPECT_EQ(slot_matched, matched);
}

TEST(EvalComposition, RejectsImpossibleSettings) {
  const auto corpus = toy_eval_corpus();
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  LookupGenerator gen(corpus, reference_tags(corpus, h));
  EvalOptions o;
  o.samples = 0;
  EXPECT_THROW(eval_composition(corpus, gen, h, o), ConfigError);
  o.samples = 1;
  o.parts_mixed = 5;
  EXPECT_THROW(eval_composition(corpus, gen, h, o), ConfigError);
  o.parts_mixed = 3;
  EXPECT_THROW(eval_composition({corpus[0], corpus[1]}, gen, h, o), ConfigError);
  EXPECT_THROW(eval_composition({}, gen, h, o), InputError);
  EXPECT_THROW(eval_composition(corpus, gen, PartHierarchy{}, o), StateError);
}

TEST(EvalReport, JsonCarriesSettingsAndPerSlotScores) {
  const auto corpus = toy_eval_corpus();
  const auto& h = oracle::toy_corpus().dictionary.hierarchy;
  LookupGenerator gen(corpus, reference_tags(corpus, h));
  EvalOptions o;
  o.samples = 4;
  o.parts_mixed = 2;
  o.seed = 9;
  o.steps = 12;
  o.guidance = 1.0;
  const auto j = to_json(eval_composition(corpus, gen, h, o));
  EXPECT_EQ(j.at("schema"), EvalReport::kSchema);
  EXPECT_EQ(j.at("protocol"), "composition");
  EXPECT_EQ(j.at("n_samples"), 4);
  EXPECT_EQ(j.at("n_composited_parts"), 2);
  EXPECT_EQ(j.at("config").at("seed"), 9);
  EXPECT_EQ(j.at("config").at("steps"), 12);
  EXPECT_EQ(j.at("per_slot").size(), 4u);
  ASSERT_EQ(j.at("samples").size(), 4u);
  EXPECT_EQ(j.at("samples")[0].at("donors").size(), 1u);
  EXPECT_EQ(j.at("samples")[0].at("target").size(), 4u);
}

TEST(Sweep, ReferenceTableAndFormatting) {
  const auto& ref = reference_lambda_table();
  ASSERT_EQ(ref.size(), 5u);
  EXPECT_EQ(ref[1].lambda, 0.01);
  EXPECT_EQ(ref[1].emr, 0.460);
  EXPECT_EQ(ref[1].cosim, 0.882);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_LE(ref[i].emr, ref[1].emr);

  SweepTable t;
  t.rows = {{0.1, 0.25, 0.5, 0.6, 0.1, 0.2}, {0.01, 0.5, 0.75, 0.7, 0.1, 0.2}};
  const auto text = format_sweep(t);
  EXPECT_NE(text.find("lambda_attn"), std::string::npos);
  EXPECT_NE(text.find("EMR"), std::string::npos);
  EXPECT_NE(text.find("0.250"), std::string::npos);
  EXPECT_NE(text.find("0.750"), std::string::npos);
  const auto j = to_json(t);
  EXPECT_EQ(j.at("rows").size(), 2u);
  EXPECT_EQ(j.at("rows")[1].at("lambda"), 0.01);
  EXPECT_EQ(j.at("reference").at("rows").size(), 5u);
  EXPECT_TRUE(j.at("reference").contains("note"));
}

TEST(Sweep, TrainsOneModelPerLambdaAndScoresIt) {
  const auto& corpus = oracle::toy_corpus();
  const auto base = backend::BaseModel::create({});
  SweepInputs in;
  in.base = &base;
  in.dictionary = &corpus.dictionary;
  in.training = oracle::toy_examples(corpus, base.autoencoder.grid(), 4);
  for (int i = 0; i < 3; ++i) in.evaluation.push_back({corpus.images[i].first, corpus.images[i].second});
  for (const auto& ex : in.training) in.probes.push_back({ex.composition, ex.image, ex.masks});
  in.probe_timesteps = {500};
  TrainingConfig c = oracle::toy_config(base);
  c.max_steps = 3;
  c.batch_size = 1;
  EvalOptions e;
  e.samples = 2;
  e.steps = 2;
  e.guidance = 1.0;
  const auto t = lambda_sweep(in, c, {0.1, 0.0}, e);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].lambda, 0.1);
  EXPECT_EQ(t.rows[1].lambda, 0.0);
  for (const auto& r : t.rows) {
    EXPECT_GE(r.emr, 0.0);
    EXPECT_LE(r.emr, 1.0);
    EXPECT_GT(r.attention_mass, 0.0);
    EXPECT_LE(r.attention_mass, 1.0);
    EXPECT_TRUE(std::isfinite(r.final_ldm));
    EXPECT_GT(r.final_attn, 0.0);
  }
  EXPECT_THROW(lambda_sweep(in, c, {}, e), ConfigError);
  SweepInputs empty;
  EXPECT_THROW(lambda_sweep(empty, c, {0.1}, e), InputError);
}

TEST(AttentionMass, UntrainedModelSpreadsAttention) {
  const auto& corpus = oracle::toy_corpus();
  const auto base = backend::BaseModel::create({});
  auto state = init_train_state(base, 3, 4, oracle::toy_config(base));
  std::vector<AttentionProbe> probes;
  for (const auto& ex : oracle::toy_examples(corpus, base.autoencoder.grid(), 4))
    probes.push_back({ex.composition, ex.image, ex.masks});
  const double m = attention_mass(state, probes, {250, 750}, 1);
  EXPECT_GT(m, 0.0);
  EXPECT_LT(m, 1.0);
  EXPECT_EQ(m, attention_mass(state, probes, {250, 750}, 1));
  EXPECT_THROW(attention_mass(state, {}, {250}, 1), InputError);
}
