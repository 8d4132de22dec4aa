#pragma once

#include "partcraft/generation.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace partcraft {

/// Fraction of slots present in `ref` whose code in `pred` is identical.
/// Throws InputError on differing slot counts or when `ref` has no present slot.
double emr(const PartComposition& pred, const PartComposition& ref);

/// Mean cosine between the sub-centroids of pred and ref codes over slots
/// present in `ref`; a slot absent in `pred` scores 0.
double cosim(const PartComposition& pred, const PartComposition& ref, const PartHierarchy& hierarchy);

/// Real image to evaluate against; compositions come from tagging.
struct EvalImage {
  std::string id;
  Image image;
};

enum class EvalProtocol { Reconstruction, Composition };
const char* to_string(EvalProtocol protocol);
EvalProtocol eval_protocol_from_string(const std::string& text);

struct EvalOptions {
  int samples = 500;
  /// Parts drawn from distinct images, base included; 1 means reconstruction.
  int parts_mixed = 1;
  std::uint64_t seed = 0;
  int steps = 50;
  double guidance = 7.5;
  std::string style_suffix;
};

struct SlotScore {
  int compared = 0;
  int matched = 0;
  double cosim_sum = 0.0;
};

struct EvalSample {
  std::string base_id;
  std::vector<std::string> donor_ids;
  /// Slots replaced by donors, in the order they were drawn.
  std::vector<int> swapped_slots;
  PartComposition target;
  PartComposition predicted;
  std::uint64_t generation_seed = 0;
  double emr = 0.0;
  double cosim = 0.0;
};

struct EvalReport {
  static constexpr const char* kSchema = "partcraft.eval-report";
  static constexpr int kVersion = 1;

  EvalProtocol protocol = EvalProtocol::Reconstruction;
  int n_samples = 0;
  int n_composited_parts = 1;
  double emr = 0.0;
  double cosim = 0.0;
  /// Indexed by slot.
  std::vector<SlotScore> per_slot;
  std::vector<EvalSample> samples;
  EvalOptions options;
  std::string checkpoint_id;
};

nlohmann::json to_json(const EvalReport& report);

/// Runs `options.samples` samples: tag a base image, overwrite
/// parts_mixed - 1 randomly popped slots (background included) with the tags
/// of distinct donor images, generate, re-tag, score against the input.
EvalReport eval_composition(const std::vector<EvalImage>& corpus, const ImageGenerator& generator,
                            const PartHierarchy& hierarchy, const EvalOptions& options);
/// eval_composition with parts_mixed = 1.
EvalReport eval_reconstruction(const std::vector<EvalImage>& corpus, const ImageGenerator& generator,
                               const PartHierarchy& hierarchy, const EvalOptions& options);

/// An image with its composition and masks at the attention grid.
struct AttentionProbe {
  PartComposition composition;
  Image image;
  PartMaskSet masks;
};

/// Mean on-mask attention mass of the part tokens when the model denoises
/// noised copies of the probes at each of `timesteps`.
double attention_mass(TrainState& state, const std::vector<AttentionProbe>& probes, const std::vector<int>& timesteps,
                      std::uint64_t seed);

struct SweepRow {
  double lambda = 0.0;
  double emr = 0.0;
  double cosim = 0.0;
  double attention_mass = 0.0;
  double final_ldm = 0.0;
  double final_attn = 0.0;
};

struct SweepReference {
  double lambda;
  double emr;
  double cosim;
};

/// Published large-scale values for comparison only.
const std::vector<SweepReference>& reference_lambda_table();

struct SweepTable {
  std::vector<SweepRow> rows;
};

nlohmann::json to_json(const SweepTable& table);
/// Plain-text table: one column per lambda, rows EMR and CoSim.
std::string format_sweep(const SweepTable& table);

struct SweepInputs {
  const backend::BaseModel* base = nullptr;
  const PartDictionary* dictionary = nullptr;
  std::vector<TrainingExample> training;
  std::vector<EvalImage> evaluation;
  std::vector<AttentionProbe> probes;
  std::vector<int> probe_timesteps = {250, 500, 750};
};

/// Trains one model per lambda from the same base and config, then scores
/// reconstruction on `inputs.evaluation`.
SweepTable lambda_sweep(const SweepInputs& inputs, const TrainingConfig& config, const std::vector<double>& lambdas,
                        const EvalOptions& eval);

}  // namespace partcraft
