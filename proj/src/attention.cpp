#include "partcraft/attention.hpp"

#include "partcraft/error.hpp"

#include <algorithm>
#include <cmath>

namespace partcraft {

const std::vector<std::string>& stable_diffusion_attention_layers() {
  static const std::vector<std::string> layers = {
      "down_blocks.2.attentions.0.transformer_blocks.0.attn2",
      "down_blocks.2.attentions.1.transformer_blocks.0.attn2",
      "up_blocks.1.attentions.0.transformer_blocks.0.attn2",
      "up_blocks.1.attentions.1.transformer_blocks.0.attn2",
      "up_blocks.1.attentions.2.transformer_blocks.0.attn2",
  };
  return layers;
}

AttentionLossKind attention_loss_kind_from_string(const std::string& text) {
  if (text == "entropy") return AttentionLossKind::Entropy;
  if (text == "mse") return AttentionLossKind::Mse;
  throw ConfigError("unknown attention loss '" + text + "'");
}

void AttentionStack::validate() const {
  if (maps.empty()) throw InputError("attention stack needs at least one layer");
  if (layer_ids.size() != maps.size()) throw InputError("attention stack layer ids do not match its maps");
  for (const auto& m : maps) {
    if (m.rows() != parts() || m.cols() != locations()) throw InputError("attention map has the wrong shape");
    if (!m.allFinite() || m.minCoeff() < 0.0 || m.maxCoeff() > 1.0) throw InputError("attention values must be finite and in [0, 1]");
  }
}

namespace {

void check_masks(const std::vector<int>& slots, GridSize grid, const PartMaskSet& masks) {
  if (masks.grid_h != grid.rows || masks.grid_w != grid.cols) {
    throw InputError("attention grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                     " does not match mask grid " + std::to_string(masks.grid_h) + "x" + std::to_string(masks.grid_w));
  }
  int present = 0;
  for (int s = 0; s < masks.slot_count(); ++s) present += masks.present[s] ? 1 : 0;
  for (int s : slots) {
    if (s < 0 || s >= masks.slot_count() || !masks.present[s]) {
      throw InputError("attention carries slot " + std::to_string(s) + " which the masks mark absent");
    }
  }
  if (present != static_cast<int>(slots.size())) throw InputError("attention and masks disagree on the present slots");
}

Matrix layer_mean(const AttentionStack& stack) {
  Matrix mean = Matrix::Zero(stack.parts(), stack.locations());
  for (const auto& m : stack.maps) mean += m;
  return mean / static_cast<double>(stack.layers());
}

Matrix mask_matrix(const std::vector<int>& slots, const PartMaskSet& masks) {
  Matrix s(static_cast<Eigen::Index>(slots.size()), masks.cells());
  for (std::size_t i = 0; i < slots.size(); ++i)
    for (int j = 0; j < masks.cells(); ++j) s(static_cast<Eigen::Index>(i), j) = masks.masks[slots[i]][j];
  return s;
}

}  // namespace

AttentionStack collect_attention(const AttentionRecord& record, const std::vector<std::string>& layer_ids,
                                 const std::map<int, int>& token_columns, GridSize grid) {
  if (layer_ids.empty()) throw ConfigError("no attention layers selected");
  AttentionStack stack;
  stack.grid = grid;
  for (const auto& [slot, col] : token_columns) stack.slots.push_back(slot);
  for (const auto& id : layer_ids) {
    auto it = record.layers.find(id);
    if (it == record.layers.end()) throw ConfigError("unknown attention layer '" + id + "'");
    const auto& heads = it->second;
    if (heads.empty()) throw InternalError("attention layer '" + id + "' recorded no heads");
    Matrix mean = heads.front();
    for (std::size_t h = 1; h < heads.size(); ++h) mean += heads[h];
    mean /= static_cast<double>(heads.size());
    if (mean.rows() != grid.rows * grid.cols) throw InputError("attention layer '" + id + "' has the wrong spatial size");
    Matrix cols(static_cast<Eigen::Index>(token_columns.size()), mean.rows());
    Eigen::Index i = 0;
    for (const auto& [slot, col] : token_columns) {
      if (col < 0 || col >= mean.cols()) {
        throw InternalError("token column for slot " + std::to_string(slot) + " missing from layer '" + id + "'");
      }
      cols.row(i++) = mean.col(col).transpose();
    }
    stack.layer_ids.push_back(id);
    stack.maps.push_back(std::move(cols));
  }
  return stack;
}

NormalizedAttention normalize(const AttentionStack& stack) {
  NormalizedAttention out;
  out.slots = stack.slots;
  out.grid = stack.grid;
  out.maps = Matrix::Zero(stack.parts(), stack.locations());
  out.degenerate.assign(static_cast<std::size_t>(stack.locations()), stack.parts() > 0);
  if (stack.parts() == 0) return out;
  const Matrix mean = layer_mean(stack);
  for (int j = 0; j < stack.locations(); ++j) {
    const double denom = mean.col(j).sum();
    out.degenerate[j] = denom <= kNormalizeEpsilon;
    out.maps.col(j) = mean.col(j) / std::max(denom, kNormalizeEpsilon);
  }
  return out;
}

AttentionLossValue attention_loss(const NormalizedAttention& normed, const PartMaskSet& masks) {
  check_masks(normed.slots, normed.grid, masks);
  AttentionLossValue out;
  if (normed.slots.empty()) return out;
  const Matrix s = mask_matrix(normed.slots, masks);
  double total = 0.0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double a = std::clamp(normed.maps(i, j), kLogClamp, 1.0 - kLogClamp);
      total -= s(i, j) * std::log(a) + (1.0 - s(i, j)) * std::log(1.0 - a);
    }
  }
  out.terms = static_cast<int>(s.size());
  out.value = total / out.terms;
  out.supervised = true;
  return out;
}

std::vector<Matrix> attention_loss_gradient(const AttentionStack& stack, const PartMaskSet& masks) {
  check_masks(stack.slots, stack.grid, masks);
  std::vector<Matrix> grads(stack.maps.size(), Matrix::Zero(stack.parts(), stack.locations()));
  if (stack.parts() == 0) return grads;
  const Matrix mean = layer_mean(stack);
  const NormalizedAttention normed = normalize(stack);
  const Matrix s = mask_matrix(stack.slots, masks);
  const double inv_terms = 1.0 / static_cast<double>(s.size());

  Matrix g_hat(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double a = normed.maps(i, j);
      if (a < kLogClamp || a > 1.0 - kLogClamp) {
        g_hat(i, j) = 0.0;
      } else {
        g_hat(i, j) = inv_terms * (-s(i, j) / a + (1.0 - s(i, j)) / (1.0 - a));
      }
    }
  }
  Matrix g_mean(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    const double denom = mean.col(j).sum();
    if (denom > kNormalizeEpsilon) {
      const double weighted = g_hat.col(j).dot(normed.maps.col(j));
      g_mean.col(j) = (g_hat.col(j).array() - weighted).matrix() / denom;
    } else {
      g_mean.col(j) = g_hat.col(j) / kNormalizeEpsilon;
    }
  }
  for (auto& g : grads) g = g_mean / static_cast<double>(stack.layers());
  return grads;
}

AttentionLossValue mse_attention_loss(const AttentionStack& stack, const PartMaskSet& masks) {
  check_masks(stack.slots, stack.grid, masks);
  AttentionLossValue out;
  if (stack.parts() == 0) return out;
  const Matrix diff = layer_mean(stack) - mask_matrix(stack.slots, masks);
  out.terms = static_cast<int>(diff.size());
  out.value = diff.squaredNorm() / out.terms;
  out.supervised = true;
  return out;
}

std::vector<Matrix> mse_attention_loss_gradient(const AttentionStack& stack, const PartMaskSet& masks) {
  check_masks(stack.slots, stack.grid, masks);
  std::vector<Matrix> grads(stack.maps.size(), Matrix::Zero(stack.parts(), stack.locations()));
  if (stack.parts() == 0) return grads;
  const Matrix diff = layer_mean(stack) - mask_matrix(stack.slots, masks);
  const double scale = 2.0 / (static_cast<double>(diff.size()) * stack.layers());
  for (auto& g : grads) g = diff * scale;
  return grads;
}

double total_loss(double ldm_loss, double attn_loss, double lambda) {
  if (!std::isfinite(ldm_loss) || !std::isfinite(attn_loss) || !std::isfinite(lambda)) {
    throw NumericError("non-finite loss component");
  }
  return ldm_loss + lambda * attn_loss;
}

std::vector<ad::Var> collect_attention(const GraphAttentionRecord& record, const std::vector<std::string>& layer_ids,
                                       const std::map<int, int>& token_columns) {
  if (layer_ids.empty()) throw ConfigError("no attention layers selected");
  std::vector<int> cols;
  for (const auto& [slot, col] : token_columns) cols.push_back(col);
  std::vector<ad::Var> out;
  for (const auto& id : layer_ids) {
    auto it = record.layers.find(id);
    if (it == record.layers.end()) throw ConfigError("unknown attention layer '" + id + "'");
    if (it->second.empty()) throw InternalError("attention layer '" + id + "' recorded no heads");
    ad::Var mean = it->second.size() == 1 ? it->second.front() : ad::average(it->second);
    for (int c : cols) {
      if (c < 0 || c >= mean.cols()) throw InternalError("token column missing from layer '" + id + "'");
    }
    out.push_back(ad::select_cols(mean, cols));
  }
  return out;
}

ad::Var attention_loss(const std::vector<ad::Var>& layer_maps, const std::vector<int>& slots, const PartMaskSet& masks,
                       GridSize grid, AttentionLossKind kind) {
  if (layer_maps.empty()) throw ConfigError("no attention layers selected");
  AttentionStack stack;
  stack.grid = grid;
  stack.slots = slots;
  for (std::size_t l = 0; l < layer_maps.size(); ++l) {
    stack.layer_ids.push_back(std::to_string(l));
    stack.maps.push_back(layer_maps[l].value().transpose());
  }
  AttentionLossValue value;
  std::vector<Matrix> grads;
  if (kind == AttentionLossKind::Entropy) {
    value = attention_loss(normalize(stack), masks);
    grads = attention_loss_gradient(stack, masks);
  } else {
    value = mse_attention_loss(stack, masks);
    grads = mse_attention_loss_gradient(stack, masks);
  }
  Matrix out(1, 1);
  out(0, 0) = value.value;
  ad::Tape* tape = layer_maps.front().tape();
  return tape->record(std::move(out), layer_maps, [grads](const Matrix& g, std::vector<Matrix*>& pg) {
    for (std::size_t l = 0; l < pg.size(); ++l)
      if (pg[l]) *pg[l] += grads[l].transpose() * g(0, 0);
  });
}

double on_mask_attention_mass(const AttentionStack& stack, const PartMaskSet& masks) {
  check_masks(stack.slots, stack.grid, masks);
  if (stack.parts() == 0) return 0.0;
  const Matrix mean = layer_mean(stack);
  const Matrix s = mask_matrix(stack.slots, masks);
  double acc = 0.0;
  int counted = 0;
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    const double total = mean.row(i).sum();
    if (total <= 0.0 || s.row(i).sum() == 0.0) continue;
    acc += mean.row(i).dot(s.row(i)) / total;
    ++counted;
  }
  return counted == 0 ? 0.0 : acc / counted;
}

}  // namespace partcraft
