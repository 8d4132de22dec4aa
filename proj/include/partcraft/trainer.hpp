#pragma once

#include "partcraft/attention.hpp"
#include "partcraft/dictionary.hpp"
#include "partcraft/model.hpp"
#include "partcraft/optim.hpp"
#include "partcraft/token_table.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace partcraft {

struct TrainingConfig {
  static constexpr const char* kSchema = "partcraft.train-config";
  static constexpr int kVersion = 1;

  // attn.*
  std::vector<std::string> attention_layers = stable_diffusion_attention_layers();
  double attention_lambda = kDefaultAttentionLambda;
  int attention_resolution = 16;
  AttentionLossKind attention_loss = AttentionLossKind::Entropy;

  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int batch_size = 2;
  int gradient_accumulation = 1;
  int epochs = 100;
  /// Stops early once this many optimizer steps ran; 0 means no cap.
  long max_steps = 0;
  int image_resolution = 512;
  bool horizontal_flip = true;

  int lora_rank = 4;
  double lora_alpha = 4.0;
  std::vector<backend::LoraTarget> lora_targets = {backend::LoraTarget::Query, backend::LoraTarget::Key,
                                                   backend::LoraTarget::Value, backend::LoraTarget::Out};

  BottleneckMode bottleneck = BottleneckMode::Bottleneck;
  /// 0 means the embedding width.
  int bottleneck_hidden = 0;
  std::string init_word = "sprite";
  double init_noise = 0.01;
  std::string prompt_template = "a photo of a [*]";

  /// Steps between checkpoints; 0 writes only the final one.
  long checkpoint_interval = 0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the first offending field.
  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainingConfig training_config_from_json(const nlohmann::json& j);
TrainingConfig load_training_config(const std::filesystem::path& path);
void save_training_config(const TrainingConfig& config, const std::filesystem::path& path);

/// One tagged training image, already decoded.
struct TrainingExample {
  std::string id;
  Image image;
  PartComposition composition;
  /// Masks at the attention grid.
  PartMaskSet masks;
};

/// Mirror image of an example: image and masks flip together, codes stay.
TrainingExample flipped(const TrainingExample& example);

/// Loads and resizes the dictionary's images; masks come from the stored tags.
std::vector<TrainingExample> load_training_corpus(const PartDictionary& dict, GridSize attention_grid);

/// Everything the optimizer touches plus the frozen model it adapts.
struct TrainState {
  static constexpr const char* kSchema = "partcraft.checkpoint";
  static constexpr int kVersion = 1;

  backend::BaseModel model;
  TokenTable tokens;
  AdamW optimizer;
  long step = 0;
  TrainingConfig config;

  /// Token table, projector and LoRA parameters.
  std::vector<ad::Parameter*> trainable();

  /// Content hash over every stored tensor, as 16 hex digits.
  std::string checkpoint_id() const;

  Archive to_archive() const;
  static TrainState from_archive(const Archive& archive);
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);
};

/// Fresh state: adds LoRA to a copy of `base` and seeds the token table at the
/// embedding of `config.init_word`.
TrainState init_train_state(const backend::BaseModel& base, int parts, int variants, const TrainingConfig& config);

/// Noise-prediction MSE for one latent at timestep t under `context`.
ad::Var ldm_loss(ad::Tape& tape, backend::Denoiser& denoiser, const backend::NoiseSchedule& schedule, const Matrix& z0,
                 const Matrix& eps, int t, ad::Var context, GraphAttentionRecord* attention = nullptr);

struct StepLog {
  long step = 0;
  int epoch = 0;
  double ldm = 0.0;
  double attn = 0.0;
  double total = 0.0;
  /// Examples in the step that carried attention supervision.
  int supervised = 0;
  int effective_batch = 0;
};

nlohmann::json to_json(const StepLog& log);

/// Forward pass of one example: ldm and attention terms as tape nodes.
struct ExampleLoss {
  ad::Var ldm;
  ad::Var attn;
  bool supervised = false;
};

ExampleLoss example_loss(ad::Tape& tape, TrainState& state, const Matrix& latent, const PartComposition& composition,
                         const PartMaskSet& masks, int t, const Matrix& eps);

/// Owns the optimization loop over a fixed corpus.
class Trainer {
 public:
  struct Options {
    /// Directory for periodic checkpoints and last-good dumps; empty disables files.
    std::filesystem::path checkpoint_dir;
    std::function<void(const StepLog&)> on_step;
  };

  Trainer(TrainState state, std::vector<TrainingExample> corpus, Options options);
  Trainer(TrainState state, std::vector<TrainingExample> corpus) : Trainer(std::move(state), std::move(corpus), Options{}) {}

  /// One optimizer step. On a non-finite loss or gradient the state rolls back
  /// to the last good snapshot and NumericError is thrown.
  StepLog step();
  /// Runs until epochs or max_steps are exhausted.
  std::vector<StepLog> run();

  long total_steps() const;
  int steps_per_epoch() const;
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  /// Path of the last checkpoint file written, if any.
  const std::optional<std::filesystem::path>& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::vector<std::size_t> next_batch();
  void snapshot();
  void write_checkpoint(const std::string& name);

  TrainState state_;
  std::vector<TrainingExample> corpus_;
  std::vector<Matrix> latents_, flipped_latents_;
  std::vector<PartMaskSet> flipped_masks_;
  Options options_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  Archive last_good_;
  std::optional<std::filesystem::path> last_checkpoint_;
};

/// Convenience wrapper: init, run, return the final state.
TrainState train(const backend::BaseModel& base, const PartDictionary& dict, std::vector<TrainingExample> corpus,
                 const TrainingConfig& config, Trainer::Options options = {});

}  // namespace partcraft
