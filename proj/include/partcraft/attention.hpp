#pragma once

#include "partcraft/autodiff.hpp"
#include "partcraft/hierarchy.hpp"
#include "partcraft/parts.hpp"

#include <map>
#include <string>
#include <vector>

namespace partcraft {

/// The five 16x16 cross-attention layers of an SD-1.x UNet used for part supervision.
const std::vector<std::string>& stable_diffusion_attention_layers();

inline constexpr double kNormalizeEpsilon = 1e-8;
inline constexpr double kLogClamp = 1e-6;
inline constexpr double kDefaultAttentionLambda = 0.01;

/// Cross-attention probabilities captured during one denoiser call:
/// per layer, one (locations x tokens) matrix per head.
template <class Map>
struct BasicAttentionRecord {
  std::map<std::string, std::vector<Map>> layers;
};
using AttentionRecord = BasicAttentionRecord<Matrix>;
using GraphAttentionRecord = BasicAttentionRecord<ad::Var>;

/// Head-averaged part columns for the selected layers: maps[l] is
/// (present parts x locations), row i belongs to slots[i].
struct AttentionStack {
  std::vector<std::string> layer_ids;
  std::vector<int> slots;
  std::vector<Matrix> maps;
  GridSize grid;

  int layers() const { return static_cast<int>(maps.size()); }
  int parts() const { return static_cast<int>(slots.size()); }
  int locations() const { return grid.rows * grid.cols; }
  /// Throws InputError unless L >= 1 and every value is finite and in [0, 1].
  void validate() const;
};

struct NormalizedAttention {
  std::vector<int> slots;
  Matrix maps;  // parts x locations
  GridSize grid;
  /// Locations whose pre-stabilization denominator was <= kNormalizeEpsilon.
  std::vector<bool> degenerate;
};

struct AttentionLossValue {
  double value = 0.0;
  /// False when no slot was present, i.e. this step carried no supervision.
  bool supervised = false;
  int terms = 0;
};

enum class AttentionLossKind { Entropy, Mse };
AttentionLossKind attention_loss_kind_from_string(const std::string& text);

/// Head mean per layer, then the columns of the part tokens. Throws
/// ConfigError for unknown layers and InternalError for missing columns.
AttentionStack collect_attention(const AttentionRecord& record, const std::vector<std::string>& layer_ids,
                                 const std::map<int, int>& token_columns, GridSize grid);

/// Layer mean followed by per-location normalization across parts.
NormalizedAttention normalize(const AttentionStack& stack);

/// Mean binary cross-entropy between clamped normalized attention and masks
/// over (present part, location) pairs.
AttentionLossValue attention_loss(const NormalizedAttention& normed, const PartMaskSet& masks);

/// d attention_loss(normalize(stack)) / d stack.maps, same shapes as stack.maps.
std::vector<Matrix> attention_loss_gradient(const AttentionStack& stack, const PartMaskSet& masks);

/// Mean-squared attention loss on layer-averaged, unnormalized maps. Ablation only.
AttentionLossValue mse_attention_loss(const AttentionStack& stack, const PartMaskSet& masks);
std::vector<Matrix> mse_attention_loss_gradient(const AttentionStack& stack, const PartMaskSet& masks);

/// ldm + lambda * attn; throws NumericError on non-finite inputs.
double total_loss(double ldm_loss, double attn_loss, double lambda);

/// Graph counterpart of collect_attention: one (locations x parts) Var per layer.
std::vector<ad::Var> collect_attention(const GraphAttentionRecord& record, const std::vector<std::string>& layer_ids,
                                       const std::map<int, int>& token_columns);

/// Attention loss as a tape node over (locations x parts) layer maps whose
/// columns belong to `slots`. The backward pass uses the analytic gradient.
ad::Var attention_loss(const std::vector<ad::Var>& layer_maps, const std::vector<int>& slots, const PartMaskSet& masks,
                       GridSize grid, AttentionLossKind kind = AttentionLossKind::Entropy);

/// Fraction of each present part's layer-averaged attention that falls
/// inside its own mask, averaged over parts.
double on_mask_attention_mass(const AttentionStack& stack, const PartMaskSet& masks);

}  // namespace partcraft
