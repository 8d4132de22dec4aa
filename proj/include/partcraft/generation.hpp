#pragma once

#include "partcraft/trainer.hpp"

#include <json.hpp>

#include <memory>
#include <string>

namespace partcraft {

struct GenerationRequest {
  PartComposition composition;
  std::string style_suffix;
  std::uint64_t seed = 0;
  int steps = 50;
  double guidance = 7.5;
};

/// Enough to reproduce an image: what was asked for and which weights answered.
struct Provenance {
  static constexpr const char* kSchema = "partcraft.provenance";
  static constexpr int kVersion = 1;

  PartComposition composition;
  std::string style_suffix;
  std::uint64_t seed = 0;
  int steps = 0;
  double guidance = 0.0;
  std::string checkpoint_id;
  std::string template_text;
  /// Rendered token sequence, for display.
  std::string prompt;
};

nlohmann::json to_json(const Provenance& p);
Provenance provenance_from_json(const nlohmann::json& j);

struct GenerationResult {
  Image image;
  Provenance provenance;
};

class ImageGenerator {
 public:
  virtual ~ImageGenerator() = default;
  virtual GenerationResult generate(const GenerationRequest& request) const = 0;
  virtual int parts() const = 0;
  virtual int variants() const = 0;
};

/// Deterministic DDIM sampling with classifier-free guidance against the
/// adapted model. The state is shared read-only, so concurrent calls are safe.
class DiffusionGenerator final : public ImageGenerator {
 public:
  explicit DiffusionGenerator(std::shared_ptr<const TrainState> state);

  GenerationResult generate(const GenerationRequest& request) const override;
  int parts() const override { return state_->tokens.parts(); }
  int variants() const override { return state_->tokens.variants(); }
  const TrainState& state() const { return *state_; }
  const std::string& checkpoint_id() const { return checkpoint_id_; }

 private:
  std::shared_ptr<const TrainState> state_;
  std::string checkpoint_id_;
};

/// DDIM timesteps with trailing spacing, first step at train_steps - 1.
std::vector<int> ddim_timesteps(int steps, int train_steps);

/// Deterministic DDIM update from alpha_bar to alpha_bar_prev (1 at the end).
Matrix ddim_step(const Matrix& z, const Matrix& eps, double alpha_bar, double alpha_bar_prev);

/// Token sequence a request renders to under `template_text`.
TokenSequence request_tokens(const GenerationRequest& request, const std::string& template_text,
                             const Vocabulary& vocab, int parts, int variants);

/// Copy of `base` with codes[slot] taken from `donor`.
PartComposition swap_part(const PartComposition& base, int slot, const PartComposition& donor);

}  // namespace partcraft
