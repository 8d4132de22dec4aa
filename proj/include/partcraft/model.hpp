#pragma once

#include "partcraft/archive.hpp"
#include "partcraft/attention.hpp"
#include "partcraft/autodiff.hpp"
#include "partcraft/hierarchy.hpp"
#include "partcraft/image.hpp"
#include "partcraft/prompt.hpp"

#include <memory>
#include <string>
#include <vector>

/// A small latent-diffusion backend: fixed patch autoencoder, frozen text
/// encoder and a cross-attention denoiser that accepts LoRA adapters. It is
/// the desk-scale stand-in for a pretrained text-to-image model.
namespace partcraft::backend {

/// DDPM noise schedule, "scaled linear" betas as in SD-1.x.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 1000, double beta_start = 0.00085, double beta_end = 0.012);

  int steps() const { return static_cast<int>(alphas_cumprod_.size()); }
  double alpha_bar(int t) const { return alphas_cumprod_.at(static_cast<std::size_t>(t)); }

  /// z_t = sqrt(abar) z0 + sqrt(1 - abar) eps
  Matrix add_noise(const Matrix& z0, const Matrix& eps, int t) const;

 private:
  std::vector<double> alphas_cumprod_;
};

/// Linear, exactly invertible map between 32x32 sprites and an 8x8x6 latent:
/// per patch, centered mean color and the three PatchBasis texture
/// amplitudes (normalized by `texture_scale`).
class PatchAutoencoder {
 public:
  static constexpr int kChannels = 6;

  PatchAutoencoder(int image_side = 32, int patch_size = 4, double texture_scale = 0.12);

  int image_side() const { return image_side_; }
  int patch_size() const { return patch_size_; }
  GridSize grid() const { return {image_side_ / patch_size_, image_side_ / patch_size_}; }
  int locations() const { return grid().rows * grid().cols; }

  /// Resizes to the native side if needed; returns locations x kChannels.
  Matrix encode(const Image& image) const;
  Image decode(const Matrix& latent) const;

 private:
  int image_side_;
  int patch_size_;
  double texture_scale_;
};

struct LoraAdapter {
  ad::Parameter down;  // in x rank
  ad::Parameter up;    // rank x out, zero-initialized
  double scale = 1.0;
};

struct DenoiserConfig {
  int latent_channels = PatchAutoencoder::kChannels;
  GridSize grid{8, 8};
  int model_dim = 32;
  int heads = 2;
  int head_dim = 8;
  int blocks = 5;
  int mlp_dim = 64;
  int context_dim = 16;
  int time_dim = 16;
};

struct DenoiserOutput {
  ad::Var eps;
  GraphAttentionRecord attention;
};

/// Anything that predicts noise from (z_t, t, text context). Test stubs
/// implement this directly.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual DenoiserOutput forward(ad::Tape& tape, ad::Var z_t, int t, ad::Var context) = 0;
  virtual std::vector<std::string> attention_layers() const = 0;
};

enum class LoraTarget { Query, Key, Value, Out };
LoraTarget lora_target_from_string(const std::string& text);
const char* to_string(LoraTarget target);

class ToyDenoiser final : public Denoiser {
 public:
  ToyDenoiser() = default;
  ToyDenoiser(const DenoiserConfig& config, Rng& rng);

  DenoiserOutput forward(ad::Tape& tape, ad::Var z_t, int t, ad::Var context) override;
  std::vector<std::string> attention_layers() const override;

  const DenoiserConfig& config() const { return config_; }

  /// Adds rank-r adapters to the given projections of every cross-attention
  /// layer; the up matrices start at zero so outputs are unchanged.
  void add_lora(int rank, const std::vector<LoraTarget>& targets, double alpha, Rng& rng);
  bool has_lora() const { return lora_rank_ > 0; }
  int lora_rank() const { return lora_rank_; }

  std::vector<ad::Parameter*> base_parameters();
  std::vector<ad::Parameter*> lora_parameters();
  void set_base_trainable(bool trainable);

  void write(Archive& archive, const std::string& prefix, bool include_lora) const;
  static ToyDenoiser read(const Archive& archive, const std::string& prefix);
  /// Restores adapters written with `include_lora`; rank and targets come from metadata.
  void read_lora(const Archive& archive, const std::string& prefix);

 private:
  struct Layer {
    std::string id;
    ad::Parameter wq, wk, wv, wo, bo;
    ad::Parameter mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    std::map<LoraTarget, LoraAdapter> lora;
  };

  ad::Var project(ad::Tape& tape, ad::Var x, ad::Parameter& w, Layer& layer, LoraTarget target);
  Matrix time_features(int t) const;

  DenoiserConfig config_;
  ad::Parameter w_in_, b_in_, pos_, time_w1_, time_b1_, time_w2_, time_b2_, w_out_, b_out_;
  std::vector<Layer> layers_;
  int lora_rank_ = 0;
  double lora_alpha_ = 0.0;
  std::vector<LoraTarget> lora_targets_;
};

/// Frozen per-token encoder: c = x + W2 tanh(x W1 + b1) + b2 over the token
/// embeddings, with a <bos> row first.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(int dim, Rng& rng);

  int dim() const { return static_cast<int>(word_embeddings_.value.cols()); }
  const Vocabulary& vocabulary() const { return vocab_; }
  RowVector word_embedding(int word_id) const { return word_embeddings_.value.row(word_id); }

  /// Part tokens take consecutive rows of `part_rows` in order of appearance.
  /// Returns (1 + tokens) x dim; column i+1 of attention belongs to token i.
  ad::Var encode(ad::Tape& tape, const TokenSequence& tokens, ad::Var part_rows);
  ad::Var encode(ad::Tape& tape, const TokenSequence& tokens);

  std::vector<ad::Parameter*> parameters();
  void write(Archive& archive, const std::string& prefix) const;
  static TextEncoder read(const Archive& archive, const std::string& prefix);

 private:
  Vocabulary vocab_;
  ad::Parameter word_embeddings_, w1_, b1_, w2_, b2_;
};

/// Attention column of each present slot's pseudo-token (offset for <bos>).
std::map<int, int> token_columns(const TokenSequence& tokens);

struct BaseModelConfig {
  int image_side = 32;
  int patch_size = 4;
  double texture_scale = 0.12;
  int train_timesteps = 1000;
  int text_dim = 16;
  DenoiserConfig denoiser;
  std::uint64_t seed = 1234;
};

/// Everything that stays frozen during part learning (LoRA lives on the
/// denoiser but is owned by the training state).
struct BaseModel {
  static constexpr const char* kSchema = "partcraft.base-model";
  static constexpr int kVersion = 1;

  BaseModelConfig config;
  NoiseSchedule schedule;
  PatchAutoencoder autoencoder;
  TextEncoder text_encoder;
  ToyDenoiser denoiser;

  static BaseModel create(const BaseModelConfig& config);

  std::vector<ad::Parameter*> frozen_parameters();

  void write(Archive& archive, bool include_lora) const;
  static BaseModel read(const Archive& archive);
  void save(const std::filesystem::path& path) const;
  static BaseModel load(const std::filesystem::path& path);
};

struct PretrainConfig {
  int steps = 3000;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double condition_dropout = 0.1;
  std::string prompt = "a photo of a sprite";
  std::uint64_t seed = 99;
};

/// Fits the base denoiser on clean latents with a generic prompt, standing
/// in for large-scale pretraining. Returns the final running loss.
double pretrain_base(BaseModel& model, const std::vector<Matrix>& latents, const PretrainConfig& config);

}  // namespace partcraft::backend
