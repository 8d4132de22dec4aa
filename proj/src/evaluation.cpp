#include "partcraft/evaluation.hpp"

#include "partcraft/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace partcraft {

using nlohmann::json;

namespace {

void check_pair(const PartComposition& pred, const PartComposition& ref) {
  if (pred.slot_count() != ref.slot_count()) throw InputError("compositions have different slot counts");
  if (ref.present_count() == 0) throw InputError("reference composition has no present slot");
}

double slot_cosine(const PartCode& pred, const PartCode& ref, const PartHierarchy& h) {
  if (pred.absent()) return 0.0;
  const RowVector a = h.centroid(pred);
  const RowVector b = h.centroid(ref);
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

json composition_json(const PartComposition& c) {
  json codes = json::array();
  for (const auto& code : c.codes) codes.push_back(code.absent() ? json(nullptr) : json(code.variant));
  return codes;
}

// Per-sample stream, so a sample's draws do not depend on earlier samples.
std::uint64_t sample_seed(std::uint64_t seed, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

double emr(const PartComposition& pred, const PartComposition& ref) {
  check_pair(pred, ref);
  int compared = 0, matched = 0;
  for (int s = 0; s < ref.slot_count(); ++s) {
    if (ref.codes[s].absent()) continue;
    ++compared;
    if (pred.codes[s] == ref.codes[s]) ++matched;
  }
  return static_cast<double>(matched) / compared;
}

double cosim(const PartComposition& pred, const PartComposition& ref, const PartHierarchy& hierarchy) {
  check_pair(pred, ref);
  if (ref.slot_count() != hierarchy.slot_count()) throw InputError("compositions do not match the hierarchy");
  double acc = 0.0;
  int compared = 0;
  for (int s = 0; s < ref.slot_count(); ++s) {
    if (ref.codes[s].absent()) continue;
    ++compared;
    acc += slot_cosine(pred.codes[s], ref.codes[s], hierarchy);
  }
  return acc / compared;
}

const char* to_string(EvalProtocol protocol) {
  return protocol == EvalProtocol::Reconstruction ? "reconstruction" : "composition";
}

EvalProtocol eval_protocol_from_string(const std::string& text) {
  if (text == "recon" || text == "reconstruction") return EvalProtocol::Reconstruction;
  if (text == "comp" || text == "composition") return EvalProtocol::Composition;
  throw ConfigError("unknown protocol '" + text + "' (expected recon or comp)");
}

json to_json(const EvalReport& r) {
  json per_slot = json::array();
  for (std::size_t s = 0; s < r.per_slot.size(); ++s) {
    const auto& p = r.per_slot[s];
    per_slot.push_back({{"slot", s},
                        {"compared", p.compared},
                        {"matched", p.matched},
                        {"emr", p.compared ? static_cast<double>(p.matched) / p.compared : 0.0},
                        {"cosim", p.compared ? p.cosim_sum / p.compared : 0.0}});
  }
  json samples = json::array();
  for (const auto& s : r.samples) {
    samples.push_back({{"base", s.base_id},
                       {"donors", s.donor_ids},
                       {"swapped_slots", s.swapped_slots},
                       {"target", composition_json(s.target)},
                       {"predicted", composition_json(s.predicted)},
                       {"generation_seed", s.generation_seed},
                       {"emr", s.emr},
                       {"cosim", s.cosim}});
  }
  return {{"schema", EvalReport::kSchema},
          {"version", EvalReport::kVersion},
          {"protocol", to_string(r.protocol)},
          {"n_samples", r.n_samples},
          {"n_composited_parts", r.n_composited_parts},
          {"emr", r.emr},
          {"cosim", r.cosim},
          {"absent_slots", "excluded when absent from the target; scored as mismatch when absent from the generation"},
          {"checkpoint", r.checkpoint_id},
          {"config",
           {{"samples", r.options.samples},
            {"parts_mixed", r.options.parts_mixed},
            {"seed", r.options.seed},
            {"steps", r.options.steps},
            {"guidance", r.options.guidance},
            {"style", r.options.style_suffix}}},
          {"per_slot", per_slot},
          {"samples", samples}};
}

EvalReport eval_composition(const std::vector<EvalImage>& corpus, const ImageGenerator& generator,
                            const PartHierarchy& hierarchy, const EvalOptions& options) {
  if (!hierarchy.fitted()) throw StateError("hierarchy is not fitted");
  if (corpus.empty()) throw InputError("evaluation corpus is empty");
  if (options.samples < 1) throw ConfigError("samples must be >= 1");
  const int slots = hierarchy.slot_count();
  if (options.parts_mixed < 1 || options.parts_mixed > slots) {
    throw ConfigError("parts_mixed must be in [1, " + std::to_string(slots) + "]");
  }
  if (options.parts_mixed > static_cast<int>(corpus.size())) {
    throw ConfigError("parts_mixed exceeds the number of evaluation images");
  }
  const auto extractor = make_extractor(hierarchy.extractor);
  const GridSize native{hierarchy.extractor.grid_side(), hierarchy.extractor.grid_side()};
  std::vector<std::optional<PartComposition>> tags(corpus.size());
  auto tag_of = [&](std::size_t i) -> const PartComposition& {
    if (!tags[i]) tags[i] = tag_image(corpus[i].image, hierarchy, *extractor, native).composition;
    return *tags[i];
  };

  EvalReport report;
  report.protocol = options.parts_mixed == 1 ? EvalProtocol::Reconstruction : EvalProtocol::Composition;
  report.n_composited_parts = options.parts_mixed;
  report.options = options;
  report.per_slot.assign(static_cast<std::size_t>(slots), {});
  if (auto* d = dynamic_cast<const DiffusionGenerator*>(&generator)) report.checkpoint_id = d->checkpoint_id();

  // Bases cycle through a seeded permutation so each image is used once per pass.
  std::vector<std::size_t> bases(corpus.size());
  std::iota(bases.begin(), bases.end(), std::size_t{0});
  Rng order_rng(options.seed);
  std::shuffle(bases.begin(), bases.end(), order_rng);

  double emr_sum = 0.0, cos_sum = 0.0;
  for (int i = 0; i < options.samples; ++i) {
    Rng rng(sample_seed(options.seed, i));
    EvalSample sample;
    const std::size_t base = bases[static_cast<std::size_t>(i) % bases.size()];
    sample.base_id = corpus[base].id;
    sample.target = tag_of(base);
    sample.generation_seed = rng();
    std::vector<int> pool(static_cast<std::size_t>(slots));
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<std::size_t> used = {base};
    for (int d = 1; d < options.parts_mixed; ++d) {
      std::size_t donor;
      do {
        donor = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
      } while (std::find(used.begin(), used.end(), donor) != used.end());
      used.push_back(donor);
      const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
      const int slot = pool[pick];
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
      sample.target.codes[slot] = tag_of(donor).codes[slot];
      sample.donor_ids.push_back(corpus[donor].id);
      sample.swapped_slots.push_back(slot);
    }
    if (sample.target.present_count() == 0) throw InputError("sample " + std::to_string(i) + " has no present parts");

    GenerationRequest request;
    request.composition = sample.target;
    request.seed = sample.generation_seed;
    request.steps = options.steps;
    request.guidance = options.guidance;
    request.style_suffix = options.style_suffix;
    const Image generated = generator.generate(request).image;
    sample.predicted = tag_image(generated, hierarchy, *extractor, native).composition;
    sample.emr = emr(sample.predicted, sample.target);
    sample.cosim = cosim(sample.predicted, sample.target, hierarchy);
    for (int s = 0; s < slots; ++s) {
      if (sample.target.codes[s].absent()) continue;
      auto& score = report.per_slot[static_cast<std::size_t>(s)];
      ++score.compared;
      if (sample.predicted.codes[s] == sample.target.codes[s]) ++score.matched;
      score.cosim_sum += slot_cosine(sample.predicted.codes[s], sample.target.codes[s], hierarchy);
    }
    emr_sum += sample.emr;
    cos_sum += sample.cosim;
    report.samples.push_back(std::move(sample));
  }
  report.n_samples = options.samples;
  report.emr = emr_sum / options.samples;
  report.cosim = cos_sum / options.samples;
  return report;
}

EvalReport eval_reconstruction(const std::vector<EvalImage>& corpus, const ImageGenerator& generator,
                               const PartHierarchy& hierarchy, const EvalOptions& options) {
  EvalOptions o = options;
  o.parts_mixed = 1;
  return eval_composition(corpus, generator, hierarchy, o);
}

double attention_mass(TrainState& state, const std::vector<AttentionProbe>& probes, const std::vector<int>& timesteps,
                      std::uint64_t seed) {
  if (probes.empty() || timesteps.empty()) throw InputError("attention probe set is empty");
  Rng rng(seed);
  double acc = 0.0;
  int counted = 0;
  for (const auto& probe : probes) {
    PromptSpec spec;
    spec.template_text = state.config.prompt_template;
    spec.composition = probe.composition;
    const TokenSequence tokens =
        render_prompt(spec, state.model.text_encoder.vocabulary(), state.tokens.parts(), state.tokens.variants());
    const auto columns = backend::token_columns(tokens);
    if (columns.empty()) continue;
    const Matrix z0 = state.model.autoencoder.encode(probe.image);
    for (int t : timesteps) {
      ad::Tape tape;
      tape.set_grad_enabled(false);
      ad::Var context = state.model.text_encoder.encode(tape, tokens, state.tokens.embed(tape, probe.composition));
      const Matrix eps = randn(z0.rows(), z0.cols(), rng);
      auto out = state.model.denoiser.forward(tape, tape.constant(state.model.schedule.add_noise(z0, eps, t)), t, context);
      AttentionRecord record;
      for (const auto& [id, heads] : out.attention.layers) {
        for (const auto& h : heads) record.layers[id].push_back(h.value());
      }
      const auto stack = collect_attention(record, state.config.attention_layers, columns, state.model.autoencoder.grid());
      acc += on_mask_attention_mass(stack, probe.masks);
      ++counted;
    }
  }
  if (counted == 0) throw InputError("no probe carried a present part");
  return acc / counted;
}

const std::vector<SweepReference>& reference_lambda_table() {
  static const std::vector<SweepReference> table = {
      {0.1, 0.339, 0.851}, {0.01, 0.460, 0.882}, {0.001, 0.445, 0.880}, {0.0001, 0.425, 0.878}, {0.00001, 0.397, 0.872}};
  return table;
}

json to_json(const SweepTable& table) {
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"lambda", r.lambda},
                    {"emr", r.emr},
                    {"cosim", r.cosim},
                    {"attention_mass", r.attention_mass},
                    {"final_ldm", r.final_ldm},
                    {"final_attn", r.final_attn}});
  }
  json reference = json::array();
  for (const auto& r : reference_lambda_table()) {
    reference.push_back({{"lambda", r.lambda}, {"emr", r.emr}, {"cosim", r.cosim}});
  }
  return {{"schema", "partcraft.lambda-sweep"},
          {"version", 1},
          {"rows", rows},
          {"reference", {{"note", "published CUB-200-2011 birds values; not comparable to toy-scale runs"},
                         {"rows", reference}}}};
}

std::string format_sweep(const SweepTable& table) {
  std::ostringstream os;
  os << std::setw(12) << std::left << "lambda_attn";
  for (const auto& r : table.rows) os << " | " << std::setw(8) << r.lambda;
  os << '\n' << std::string(12, '-');
  for (std::size_t i = 0; i < table.rows.size(); ++i) os << "-+---------";
  os << '\n' << std::setw(12) << "EMR" << std::fixed << std::setprecision(3);
  for (const auto& r : table.rows) os << " | " << std::setw(8) << r.emr;
  os << '\n' << std::setw(12) << "CoSim";
  for (const auto& r : table.rows) os << " | " << std::setw(8) << r.cosim;
  os << '\n';
  return os.str();
}

SweepTable lambda_sweep(const SweepInputs& inputs, const TrainingConfig& config, const std::vector<double>& lambdas,
                        const EvalOptions& eval) {
  if (!inputs.base || !inputs.dictionary) throw InputError("sweep needs a base model and a dictionary");
  if (lambdas.empty()) throw ConfigError("lambda list is empty");
  SweepTable table;
  for (double lambda : lambdas) {
    TrainingConfig c = config;
    c.attention_lambda = lambda;
    Trainer trainer(init_train_state(*inputs.base, inputs.dictionary->hierarchy.parts,
                                     inputs.dictionary->hierarchy.variants, c),
                    inputs.training);
    const auto logs = trainer.run();
    SweepRow row;
    row.lambda = lambda;
    if (!logs.empty()) {
      row.final_ldm = logs.back().ldm;
      row.final_attn = logs.back().attn;
    }
    auto state = std::make_shared<TrainState>(std::move(trainer.state()));
    if (!inputs.probes.empty()) row.attention_mass = attention_mass(*state, inputs.probes, inputs.probe_timesteps, eval.seed);
    DiffusionGenerator generator(state);
    const EvalReport report = eval_reconstruction(inputs.evaluation, generator, inputs.dictionary->hierarchy, eval);
    row.emr = report.emr;
    row.cosim = report.cosim;
    table.rows.push_back(row);
  }
  return table;
}

}  // namespace partcraft
